//! Inner-loop policy optimization: natural-gradient TRPO steps, training
//! against the learned model, and zero-shot adaptation to a new task. None
//! of these touch the real environment.

use crate::dyn_model::{DynModel, TransitionDataset, VirtualDynamics};
use crate::envs::{State, TaskReward};
use crate::error::{AdmrlError, Result};
use crate::policy::Policy;
use crate::rollout::{advantages, collect, SampleCounter, StepWeights, Trajectory};
use crate::task_grad::{cg_solve, CgConfig};
use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrpoConfig {
    pub kl_limit: f64,
    pub cg_iters_inner: usize,
    pub backtrack_count: usize,
    /// Virtual samples (steps) collected per policy update.
    pub n_trpo: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        TrpoConfig { kl_limit: 0.01, cg_iters_inner: 20, backtrack_count: 10, n_trpo: 2000 }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_limit > 0.0) {
            return Err(AdmrlError::Input("kl_limit must be > 0".into()));
        }
        if self.n_trpo < 1 {
            return Err(AdmrlError::Input("n_trpo must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TrpoReport {
    pub accepted: bool,
    /// Degenerate Fisher system: CG could not reduce the residual.
    pub warning: bool,
    pub kl: f64,
    pub surrogate_improvement: f64,
}

/// Importance-weighted surrogate objective relative to the sampling policy.
fn surrogate(
    policy: &dyn Policy,
    theta_old: &[f64],
    theta_new: &[f64],
    batch: &[Trajectory],
    weights: &StepWeights,
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    for (traj, w) in batch.iter().zip(&weights.per_traj) {
        let mut disc = 1.0;
        for t in 0..traj.horizon() {
            let lo = policy.log_prob(theta_old, &traj.states[t], &traj.actions[t]);
            let ln = policy.log_prob(theta_new, &traj.states[t], &traj.actions[t]);
            total += disc * (ln - lo).exp() * w[t];
            disc *= gamma;
        }
    }
    total / batch.len() as f64
}

/// One TRPO update on a collected batch: natural gradient through a CG
/// solve of the Fisher system, then a backtracking line search enforcing
/// sampled KL <= 1.5 * kl_limit and non-negative surrogate improvement.
/// Returns theta unchanged (with the report saying so) when no step along
/// the search direction qualifies.
pub fn trpo_step(
    policy: &dyn Policy,
    theta: &[f64],
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    cfg: &TrpoConfig,
) -> Result<(Vec<f64>, TrpoReport)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(AdmrlError::Input("trpo_step: empty batch".into()));
    }
    let weights = advantages(batch, rew, psi, gamma)?;
    let g = crate::task_grad::policy_grad_weighted(policy, theta, batch, &weights, gamma);
    let gnorm = g.dot(&g).sqrt();
    let mut report = TrpoReport::default();
    if gnorm == 0.0 {
        return Ok((theta.to_vec(), report));
    }
    // Fisher-vector products from the exact log-prob Hessian, averaged over
    // all steps of the batch: F x = -mean hess log pi . x.
    let n_steps: usize = batch.iter().map(|t| t.horizon()).sum();
    let fisher_entries: Vec<(State, crate::envs::Action, f64)> = batch
        .iter()
        .flat_map(|traj| {
            (0..traj.horizon()).map(move |t| {
                (traj.states[t].clone(), traj.actions[t].clone(), 1.0 / n_steps as f64)
            })
        })
        .collect();
    let fisher = |x: &Array1<f64>| -> Array1<f64> {
        -policy.logp_hvp(theta, &fisher_entries, x).expect("dimensions fixed within trpo_step")
    };
    let cg_cfg = CgConfig { max_iters: cfg.cg_iters_inner, residual_tol: 1e-10, damping: 1e-4 };
    let sol = cg_solve(&fisher, &g, &cg_cfg)?;
    if sol.rel_residual >= 1.0 {
        report.warning = true;
        return Ok((theta.to_vec(), report));
    }
    let d = sol.x;
    let dfd = d.dot(&fisher(&d));
    if !(dfd > 0.0) {
        report.warning = true;
        return Ok((theta.to_vec(), report));
    }
    let full_step = (2.0 * cfg.kl_limit / dfd).sqrt();
    let states: Vec<State> =
        batch.iter().flat_map(|t| t.states[..t.horizon()].iter().cloned()).collect();
    let surr_old = surrogate(policy, theta, theta, batch, &weights, gamma);
    for i in 0..cfg.backtrack_count {
        let scale = full_step * 0.5f64.powi(i as i32);
        let cand: Vec<f64> = theta.iter().zip(d.iter()).map(|(&t, &di)| t + scale * di).collect();
        let kl = policy.mean_kl(theta, &cand, &states);
        let improvement = surrogate(policy, theta, &cand, batch, &weights, gamma) - surr_old;
        if kl <= 1.5 * cfg.kl_limit && improvement >= 0.0 {
            report.accepted = true;
            report.kl = kl;
            report.surrogate_improvement = improvement;
            return Ok((cand, report));
        }
    }
    Ok((theta.to_vec(), report))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VirtualTrainingBudget {
    /// Outer iterations: each refits the model and runs n_policy updates.
    pub n: usize,
    pub n_model: usize,
    pub n_policy: usize,
}

/// Normalized first-order optimality gate on the inner problem.
pub const TOL_INNER: f64 = 1e-2;

/// Sampled model-value policy-gradient norm, normalized by sqrt(p); the
/// quantity gated by `TOL_INNER`.
pub fn inner_grad_norm(
    policy: &dyn Policy,
    theta: &[f64],
    model: &DynModel,
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    horizon: usize,
    reset_state: &State,
    n_traj: usize,
    rng: &mut ChaCha8Rng,
    counter: &mut SampleCounter,
) -> Result<f64> {
    let venv = VirtualDynamics { model, reset_state: reset_state.clone() };
    let batch = collect(&venv, policy, theta, n_traj, horizon, rng, 0.0, counter)?;
    let weights = advantages(&batch, rew, psi, gamma)?;
    let g = crate::task_grad::policy_grad_weighted(policy, theta, &batch, &weights, gamma);
    Ok(g.dot(&g).sqrt() / (policy.num_params() as f64).sqrt())
}

/// SLBO-style interleaving against the learned model: each of `budget.n`
/// iterations refits the model on the (fixed, real) dataset and then runs
/// `budget.n_policy` TRPO updates on freshly collected virtual batches.
/// Consumes zero real samples.
#[allow(clippy::too_many_arguments)]
pub fn virtual_training(
    policy: &dyn Policy,
    theta: &[f64],
    model: &mut DynModel,
    dataset: &TransitionDataset,
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    horizon: usize,
    reset_state: &State,
    budget: &VirtualTrainingBudget,
    trpo: &TrpoConfig,
    rng: &mut ChaCha8Rng,
    counter: &mut SampleCounter,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(AdmrlError::State("virtual_training requires a non-empty dataset".into()));
    }
    trpo.validate()?;
    let mut theta = theta.to_vec();
    let n_traj = (trpo.n_trpo / horizon).max(1);
    // TRPO against an imperfect model can drift away from a good policy
    // late in the schedule; the returned policy is the best candidate by
    // virtual return, which costs no real samples
    let mut best = f64::NEG_INFINITY;
    let mut best_theta = theta.clone();
    for _ in 0..budget.n {
        model.fit(dataset, budget.n_model, rng)?;
        for _ in 0..budget.n_policy {
            let venv = VirtualDynamics { model: &*model, reset_state: reset_state.clone() };
            let batch = collect(&venv, policy, &theta, n_traj, horizon, rng, 0.0, counter)?;
            let mean = batch_mean_return(&batch, rew, psi, gamma)?;
            if mean > best {
                best = mean;
                best_theta = theta.clone();
            }
            let (next, _report) = trpo_step(policy, &theta, &batch, rew, psi, gamma, trpo)?;
            theta = next;
        }
    }
    // the last TRPO update has not been scored yet
    let venv = VirtualDynamics { model: &*model, reset_state: reset_state.clone() };
    let batch = collect(&venv, policy, &theta, n_traj, horizon, rng, 0.0, counter)?;
    if batch_mean_return(&batch, rew, psi, gamma)? > best {
        best_theta = theta;
    }
    Ok(best_theta)
}

fn batch_mean_return(
    batch: &[crate::rollout::Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for t in batch {
        total += crate::rollout::return_of(t, rew, psi, gamma)?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug)]
pub enum ZeroShotOutcome {
    Adapted {
        theta: Vec<f64>,
        /// Normalized sampled gradient norm at the returned parameters.
        grad_norm: f64,
        /// Whether grad_norm passed the TOL_INNER gate.
        converged: bool,
    },
    /// Algorithm guard: with no data yet there is nothing to adapt to.
    SkippedEmptyDataset,
}

/// Adaptation to a task with zero real samples: a fresh random policy
/// trained entirely against the (refit) model.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_adapt(
    policy: &dyn Policy,
    model: &mut DynModel,
    dataset: &TransitionDataset,
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    horizon: usize,
    reset_state: &State,
    n_zeroshot: usize,
    n_model: usize,
    n_policy: usize,
    trpo: &TrpoConfig,
    rng: &mut ChaCha8Rng,
    counter: &mut SampleCounter,
) -> Result<ZeroShotOutcome> {
    if dataset.is_empty() {
        return Ok(ZeroShotOutcome::SkippedEmptyDataset);
    }
    let theta0 = policy.init_params(rng);
    let budget = VirtualTrainingBudget { n: n_zeroshot, n_model, n_policy };
    let theta = virtual_training(
        policy,
        &theta0,
        model,
        dataset,
        rew,
        psi,
        gamma,
        horizon,
        reset_state,
        &budget,
        trpo,
        rng,
        counter,
    )?;
    let n_traj = (trpo.n_trpo / horizon).max(1);
    let grad_norm = inner_grad_norm(
        policy,
        &theta,
        model,
        rew,
        psi,
        gamma,
        horizon,
        reset_state,
        n_traj,
        rng,
        counter,
    )?;
    Ok(ZeroShotOutcome::Adapted { theta, grad_norm, converged: grad_norm < TOL_INNER })
}
