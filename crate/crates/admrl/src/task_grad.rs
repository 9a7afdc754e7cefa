//! The adversary's gradient machinery: sampled policy gradients, the mixed
//! theta-psi derivative, REINFORCE Hessian-vector products, a damped
//! normal-equation conjugate-gradient solver, and their assembly into the
//! task-parameter gradient of the suboptimality gap.

use crate::envs::{TaskBox, TaskParams, TaskReward, project_task};
use crate::error::{AdmrlError, Result};
use crate::policy::Policy;
use crate::rollout::{
    advantage_grad_psi, advantages, return_grad_psi, return_of, Source, StepWeights, Trajectory,
};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Relative residual target on the damped normal equations.
    pub residual_tol: f64,
    /// Tikhonov damping lambda on A^T A.
    pub damping: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { max_iters: 200, residual_tol: 1e-8, damping: 1e-3 }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(AdmrlError::Input("cg max_iters must be >= 1".into()));
        }
        if self.damping < 0.0 || !self.damping.is_finite() {
            return Err(AdmrlError::Input("cg damping must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Array1<f64>,
    /// ||(A^T A + lambda I) x - A^T b|| / ||A^T b|| at the returned iterate.
    pub rel_residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Conjugate gradient on the damped normal equations
/// (A^T A + lambda I) x = A^T b for a symmetric operator A, returning the
/// best iterate seen. `apply_a` must be deterministic and linear.
pub fn cg_solve(
    apply_a: &dyn Fn(&Array1<f64>) -> Array1<f64>,
    b: &Array1<f64>,
    cfg: &CgConfig,
) -> Result<CgOutcome> {
    cfg.validate()?;
    let apply_m = |x: &Array1<f64>| -> Array1<f64> {
        let mut y = apply_a(&apply_a(x));
        y.scaled_add(cfg.damping, x);
        y
    };
    let rhs = apply_a(b);
    let rhs_norm = rhs.dot(&rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok(CgOutcome { x: Array1::zeros(b.len()), rel_residual: 0.0, iters: 0, converged: true });
    }
    let mut x = Array1::<f64>::zeros(b.len());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut best = x.clone();
    let mut best_res = rs.sqrt() / rhs_norm;
    let mut iters = 0;
    for _ in 0..cfg.max_iters {
        let mp = apply_m(&p);
        let denom = p.dot(&mp);
        if denom.abs() < 1e-300 {
            break;
        }
        let alpha = rs / denom;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &mp);
        iters += 1;
        let rs_new = r.dot(&r);
        let rel = rs_new.sqrt() / rhs_norm;
        if rel < best_res {
            best_res = rel;
            best = x.clone();
        }
        if rel < cfg.residual_tol {
            break;
        }
        p = &r + &(p * (rs_new / rs));
        rs = rs_new;
    }
    let converged = best_res < cfg.residual_tol;
    Ok(CgOutcome { x: best, rel_residual: best_res, iters, converged })
}

fn require_source(batch: &[Trajectory], want: Source, what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(AdmrlError::Input(format!("{what}: empty batch")));
    }
    if batch.iter().any(|t| t.source != want) {
        return Err(AdmrlError::Input(format!("{what}: batch has wrong provenance tag")));
    }
    Ok(())
}

/// Discount-weighted score average with externally supplied per-step
/// weights: mean over trajectories of sum_t gamma^t * score_t * w_t.
pub fn policy_grad_weighted(
    policy: &dyn Policy,
    theta: &[f64],
    batch: &[Trajectory],
    weights: &StepWeights,
    gamma: f64,
) -> Array1<f64> {
    let mut g = Array1::zeros(policy.num_params());
    for (traj, w) in batch.iter().zip(&weights.per_traj) {
        let mut disc = 1.0;
        for t in 0..traj.horizon() {
            let score = policy.grad_log_prob(theta, &traj.states[t], &traj.actions[t]);
            g.scaled_add(disc * w[t], &score);
            disc *= gamma;
        }
    }
    g / batch.len() as f64
}

/// Sampled policy gradient on real on-policy data with a fitted advantage
/// baseline. Rejects virtual batches: this expectation is under the true
/// dynamics.
pub fn policy_grad_real(
    policy: &dyn Policy,
    theta: &[f64],
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    require_source(batch, Source::Real, "policy_grad_real")?;
    let adv = advantages(batch, rew, psi, gamma)?;
    Ok(policy_grad_weighted(policy, theta, batch, &adv, gamma))
}

/// Mixed derivative of the model-value policy gradient w.r.t. psi:
/// mean over trajectories of sum_t gamma^t * score_t (x) dA_t/dpsi.
/// Rejects real batches: this expectation is under the learned model.
pub fn mixed_grad(
    policy: &dyn Policy,
    theta: &[f64],
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<Array2<f64>> {
    require_source(batch, Source::Virtual, "mixed_grad")?;
    let dadv = advantage_grad_psi(batch, rew, psi, gamma)?;
    let p = policy.num_params();
    let k = psi.len();
    let mut m = Array2::zeros((p, k));
    for (traj, dw) in batch.iter().zip(&dadv.per_traj) {
        let mut disc = 1.0;
        for t in 0..traj.horizon() {
            let score = policy.grad_log_prob(theta, &traj.states[t], &traj.actions[t]);
            for i in 0..p {
                let si = disc * score[i];
                for j in 0..k {
                    m[[i, j]] += si * dw[t][j];
                }
            }
            disc *= gamma;
        }
    }
    Ok(m / batch.len() as f64)
}

/// Precomputed pieces of the REINFORCE Hessian estimator on a frozen batch:
/// per-trajectory total scores, discounted returns, and weighted (s, a)
/// entries for the log-prob Hessian term.
pub struct HessianBatch {
    traj_scores: Vec<Array1<f64>>,
    returns: Vec<f64>,
    hvp_entries: Vec<(crate::envs::State, crate::envs::Action, f64)>,
}

pub fn freeze_for_hessian(
    policy: &dyn Policy,
    theta: &[f64],
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<HessianBatch> {
    if batch.is_empty() {
        return Err(AdmrlError::Input("freeze_for_hessian: empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut traj_scores = Vec::with_capacity(batch.len());
    let mut returns = Vec::with_capacity(batch.len());
    let mut hvp_entries = Vec::new();
    for traj in batch {
        let ret = return_of(traj, rew, psi, gamma)?;
        let mut s_tot = Array1::zeros(policy.num_params());
        for t in 0..traj.horizon() {
            s_tot += &policy.grad_log_prob(theta, &traj.states[t], &traj.actions[t]);
            hvp_entries.push((traj.states[t].clone(), traj.actions[t].clone(), ret / n));
        }
        traj_scores.push(s_tot);
        returns.push(ret);
    }
    Ok(HessianBatch { traj_scores, returns, hvp_entries })
}

/// Applies the sample Hessian estimate to `x` without assembling it:
/// mean over trajectories of R(tau) * (S S^T + hess log pi(tau)) x, with the
/// outer-product term applied as S (S . x).
pub fn hessian_vec_frozen(
    policy: &dyn Policy,
    theta: &[f64],
    frozen: &HessianBatch,
    x: &Array1<f64>,
) -> Result<Array1<f64>> {
    if x.len() != policy.num_params() {
        return Err(AdmrlError::Input("hessian_vec: direction has wrong dimension".into()));
    }
    let n = frozen.traj_scores.len() as f64;
    let mut g = policy.logp_hvp(theta, &frozen.hvp_entries, x)?;
    for (s_tot, &ret) in frozen.traj_scores.iter().zip(&frozen.returns) {
        g.scaled_add(ret * s_tot.dot(x) / n, s_tot);
    }
    Ok(g)
}

/// One-shot Hessian-vector product; freezes and applies in one call.
pub fn hessian_vec(
    policy: &dyn Policy,
    theta: &[f64],
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    x: &Array1<f64>,
) -> Result<Array1<f64>> {
    let frozen = freeze_for_hessian(policy, theta, batch, rew, psi, gamma)?;
    hessian_vec_frozen(policy, theta, &frozen, x)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CgDiagnostics {
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
}

/// Implicit Jacobian columns from an explicit Hessian operator: for each
/// column b_j of `b`, -cg_solve(apply_a, b_j). k independent solves.
pub fn dtheta_dpsi_from_operator(
    apply_a: &dyn Fn(&Array1<f64>) -> Array1<f64>,
    b: &Array2<f64>,
    cfg: &CgConfig,
) -> Result<(Array2<f64>, CgDiagnostics)> {
    let (p, k) = b.dim();
    let mut out = Array2::zeros((p, k));
    let mut diag = CgDiagnostics::default();
    for j in 0..k {
        let col = b.column(j).to_owned();
        let sol = cg_solve(apply_a, &col, cfg)?;
        for i in 0..p {
            out[[i, j]] = -sol.x[i];
        }
        diag.residuals.push(sol.rel_residual);
        diag.converged.push(sol.converged);
    }
    Ok((out, diag))
}

/// Implicit Jacobian d theta_hat / d psi^T estimated on one frozen virtual
/// batch: the Hessian operator and the mixed-derivative right-hand sides
/// both reuse the same samples for all CG products.
pub fn dtheta_dpsi(
    policy: &dyn Policy,
    theta_hat: &[f64],
    virtual_batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    cfg: &CgConfig,
) -> Result<(Array2<f64>, CgDiagnostics)> {
    let b = mixed_grad(policy, theta_hat, virtual_batch, rew, psi, gamma)?;
    let frozen = freeze_for_hessian(policy, theta_hat, virtual_batch, rew, psi, gamma)?;
    let apply = |x: &Array1<f64>| {
        hessian_vec_frozen(policy, theta_hat, &frozen, x)
            .expect("dimension checked by mixed_grad")
    };
    dtheta_dpsi_from_operator(&apply, &b, cfg)
}

/// The assembled task-parameter gradient of the suboptimality gap, with the
/// three terms kept separate for diagnosis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradEstimate {
    pub term_opt: Array1<f64>,
    pub term_chain: Array1<f64>,
    pub term_hat: Array1<f64>,
    pub total: Array1<f64>,
    pub cg: CgDiagnostics,
    pub n_real_star: usize,
    pub n_real_hat: usize,
    pub n_virtual: usize,
}

fn mean_return_grad(
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    let mut g = Array1::zeros(psi.len());
    for traj in batch {
        g += &return_grad_psi(traj, rew, psi, gamma)?;
    }
    Ok(g / batch.len() as f64)
}

/// Assembles d gap / d psi: the psi-gradient of the optimal-policy return
/// minus both the chain term through theta_hat and the direct psi-gradient
/// at theta_hat.
#[allow(clippy::too_many_arguments)]
pub fn task_gradient(
    policy: &dyn Policy,
    theta_star: &[f64],
    theta_hat: &[f64],
    real_batch_star: &[Trajectory],
    real_batch_hat: &[Trajectory],
    virtual_batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
    cfg: &CgConfig,
) -> Result<GradEstimate> {
    if theta_star.len() != policy.num_params() || theta_hat.len() != policy.num_params() {
        return Err(AdmrlError::Input("task_gradient: parameter dimension mismatch".into()));
    }
    require_source(real_batch_star, Source::Real, "task_gradient(star batch)")?;
    require_source(real_batch_hat, Source::Real, "task_gradient(hat batch)")?;
    require_source(virtual_batch, Source::Virtual, "task_gradient(virtual batch)")?;
    let term_opt = mean_return_grad(real_batch_star, rew, psi, gamma)?;
    let term_hat = mean_return_grad(real_batch_hat, rew, psi, gamma)?;
    let (jac, cg) = dtheta_dpsi(policy, theta_hat, virtual_batch, rew, psi, gamma, cfg)?;
    let pg = policy_grad_real(policy, theta_hat, real_batch_hat, rew, psi, gamma)?;
    let term_chain = jac.t().dot(&pg);
    // Grouped so shared star/hat samples cancel exactly in floating point.
    let total = &(&term_opt - &term_hat) - &term_chain;
    Ok(GradEstimate {
        term_opt,
        term_chain,
        term_hat,
        total,
        cg,
        n_real_star: real_batch_star.len(),
        n_real_hat: real_batch_hat.len(),
        n_virtual: virtual_batch.len(),
    })
}

/// One projected ascent step on the task parameters.
pub fn task_ascent_step(
    bounds: &TaskBox,
    psi: &Array1<f64>,
    grad: &Array1<f64>,
    alpha: f64,
) -> Result<TaskParams> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(AdmrlError::Input("task_ascent_step: alpha must be positive".into()));
    }
    project_task(bounds, &(psi + &(grad * alpha)))
}
