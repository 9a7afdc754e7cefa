//! Trajectory collection on true or virtual dynamics, and psi-parametric
//! returns, advantages and their psi-gradients. Rewards are never stored on
//! a trajectory: they are recomputed under any psi, so collected samples can
//! be reused across task parameters at zero real-sample cost.

use crate::envs::{Action, Dynamics, State, TaskReward};
use crate::error::Result;
use crate::math::ridge_least_squares;
use crate::policy::Policy;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Real,
    Virtual,
}

/// (state, action) sequence; |states| = |actions| + 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub source: Source,
    pub seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Counts true-environment steps; the only mutable budget in the system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounter {
    pub real_steps: u64,
}

/// Per-step scalar weights aligned with a trajectory batch.
#[derive(Clone, Debug)]
pub struct StepWeights {
    pub per_traj: Vec<Vec<f64>>,
}

/// Per-step psi-gradient vectors aligned with a trajectory batch.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub per_traj: Vec<Vec<Array1<f64>>>,
}

/// Rolls out `n_traj` trajectories of `horizon` steps under `policy`, with
/// exploration noise of standard deviation `noise_std` added to actions.
/// Advances the real-sample counter only for real dynamics.
pub fn collect(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    theta: &[f64],
    n_traj: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    noise_std: f64,
    counter: &mut SampleCounter,
) -> Result<Vec<Trajectory>> {
    let source = if dynamics.is_real() { Source::Real } else { Source::Virtual };
    let mut batch = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let seed: u64 = rng.gen();
        let mut traj_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = dynamics.reset(&mut traj_rng);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        states.push(s.clone());
        for _ in 0..horizon {
            let mut a = policy.sample_action(theta, &s, &mut traj_rng);
            if noise_std > 0.0 {
                for v in a.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut traj_rng);
                    *v += noise_std * z;
                }
            }
            s = dynamics.step(&s, &a, &mut traj_rng)?;
            actions.push(a);
            states.push(s.clone());
        }
        if dynamics.is_real() {
            counter.real_steps += horizon as u64;
        }
        batch.push(Trajectory { states, actions, source, seed });
    }
    Ok(batch)
}

/// Per-step rewards of one trajectory under psi, recomputed on demand.
pub fn step_rewards(
    traj: &Trajectory,
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
) -> Result<Vec<f64>> {
    (0..traj.horizon())
        .map(|t| rew.reward_at(psi, &traj.states[t], &traj.actions[t], &traj.states[t + 1]))
        .collect()
}

/// Discounted return sum_t gamma^t r_psi(s_t, a_t, s_{t+1}).
pub fn return_of(
    traj: &Trajectory,
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<f64> {
    let rewards = step_rewards(traj, rew, psi)?;
    let mut total = 0.0;
    let mut disc = 1.0;
    for r in rewards {
        total += disc * r;
        disc *= gamma;
    }
    Ok(total)
}

/// Gradient of `return_of` w.r.t. psi: sum_t gamma^t dr/dpsi.
pub fn return_grad_psi(
    traj: &Trajectory,
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    let mut total = Array1::zeros(psi.len());
    let mut disc = 1.0;
    for t in 0..traj.horizon() {
        let g = rew.reward_grad_at(psi, &traj.states[t], &traj.actions[t], &traj.states[t + 1])?;
        total.scaled_add(disc, &g);
        disc *= gamma;
    }
    Ok(total)
}

/// Polynomial state features for the value baseline: [1, s, s^2].
fn baseline_features(s: &State) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + 2 * s.len());
    f.push(1.0);
    f.extend(s.iter().copied());
    f.extend(s.iter().map(|v| v * v));
    f
}

/// Monte Carlo reward-to-go per step of each trajectory.
pub fn rewards_to_go(
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(batch.len());
    for traj in batch {
        let rewards = step_rewards(traj, rew, psi)?;
        let mut togo = vec![0.0; rewards.len()];
        let mut acc = 0.0;
        for t in (0..rewards.len()).rev() {
            acc = rewards[t] + gamma * acc;
            togo[t] = acc;
        }
        out.push(togo);
    }
    Ok(out)
}

/// Advantages: reward-to-go minus a least-squares state-value baseline on a
/// fixed polynomial feature map, refit per (batch, psi).
pub fn advantages(
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<StepWeights> {
    let togo = rewards_to_go(batch, rew, psi, gamma)?;
    let baseline = fit_baseline(batch, &togo);
    Ok(apply_baseline(batch, &togo, &baseline))
}

/// Fits the value baseline weights on (features, reward-to-go) pairs.
pub fn fit_baseline(batch: &[Trajectory], togo: &[Vec<f64>]) -> Array1<f64> {
    let n_steps: usize = batch.iter().map(|t| t.horizon()).sum();
    if n_steps == 0 {
        return Array1::zeros(0);
    }
    let feat_dim = baseline_features(&batch[0].states[0]).len();
    let mut x = Array2::zeros((n_steps, feat_dim));
    let mut y = Array1::zeros(n_steps);
    let mut row = 0;
    for (traj, tg) in batch.iter().zip(togo) {
        for t in 0..traj.horizon() {
            let f = baseline_features(&traj.states[t]);
            for (j, v) in f.iter().enumerate() {
                x[[row, j]] = *v;
            }
            y[row] = tg[t];
            row += 1;
        }
    }
    ridge_least_squares(&x, &y, 1e-8)
}

/// Subtracts a frozen baseline from reward-to-go values.
pub fn apply_baseline(
    batch: &[Trajectory],
    togo: &[Vec<f64>],
    baseline: &Array1<f64>,
) -> StepWeights {
    let per_traj = batch
        .iter()
        .zip(togo)
        .map(|(traj, tg)| {
            (0..traj.horizon())
                .map(|t| {
                    let f = baseline_features(&traj.states[t]);
                    let v: f64 = f.iter().zip(baseline.iter()).map(|(a, b)| a * b).sum();
                    tg[t] - v
                })
                .collect()
        })
        .collect();
    StepWeights { per_traj }
}

/// psi-gradient of the reward-to-go at every step; the baseline is treated
/// as psi-constant, so this is exactly the suffix sum of reward gradients.
pub fn advantage_grad_psi(
    batch: &[Trajectory],
    rew: &dyn TaskReward,
    psi: &Array1<f64>,
    gamma: f64,
) -> Result<StepGrads> {
    let k = psi.len();
    let mut out = Vec::with_capacity(batch.len());
    for traj in batch {
        let h = traj.horizon();
        let mut grads: Vec<Array1<f64>> = vec![Array1::zeros(k); h];
        let mut acc = Array1::<f64>::zeros(k);
        for t in (0..h).rev() {
            let g =
                rew.reward_grad_at(psi, &traj.states[t], &traj.actions[t], &traj.states[t + 1])?;
            acc = &g + &(acc * gamma);
            grads[t] = acc.clone();
        }
        out.push(grads);
    }
    Ok(StepGrads { per_traj: out })
}
