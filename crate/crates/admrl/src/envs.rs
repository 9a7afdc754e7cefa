//! Analytic environments and differentiable parameterized reward families.
//!
//! `PointMass2D` is a clipped double-integrator: the velocity-matching and
//! linear-state reward families are defined on its post-transition state.

use crate::error::{AdmrlError, Result};
use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type State = Array1<f64>;
pub type Action = Array1<f64>;

/// Box of admissible task parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBox {
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
}

impl TaskBox {
    pub fn new(lo: Array1<f64>, hi: Array1<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(AdmrlError::Input("task box bounds must be same nonzero length".into()));
        }
        for i in 0..lo.len() {
            if !(lo[i] < hi[i]) {
                return Err(AdmrlError::Input(format!("task box requires lo[{i}] < hi[{i}]")));
            }
        }
        Ok(TaskBox { lo, hi })
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        TaskBox {
            lo: Array1::from_elem(dim, -half_width),
            hi: Array1::from_elem(dim, half_width),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Array1<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn contains(&self, psi: &Array1<f64>) -> bool {
        psi.len() == self.dim()
            && psi
                .iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lo[i] && v <= self.hi[i])
    }
}

/// Task parameters, componentwise inside a `TaskBox` after projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub psi: Array1<f64>,
}

/// Componentwise clip of `psi` into the box; idempotent.
pub fn project_task(task_box: &TaskBox, psi: &Array1<f64>) -> Result<TaskParams> {
    if psi.len() != task_box.dim() {
        return Err(AdmrlError::Input("psi dimension does not match task box".into()));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(AdmrlError::Input("psi must be finite".into()));
    }
    let clipped = Array1::from_iter(
        psi.iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(task_box.lo[i], task_box.hi[i])),
    );
    Ok(TaskParams { psi: clipped })
}

/// State normalization statistics, sigma floored at `EPS_NORM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

pub const EPS_NORM: f64 = 1e-6;

/// Componentwise mean and (floored) population standard deviation.
pub fn normalize_stats(states: &[State]) -> Result<NormStats> {
    if states.len() < 2 {
        return Err(AdmrlError::Input("normalize_stats needs at least 2 states".into()));
    }
    let d = states[0].len();
    let n = states.len() as f64;
    let mut mu = Array1::<f64>::zeros(d);
    for s in states {
        mu += s;
    }
    mu /= n;
    let mut var = Array1::<f64>::zeros(d);
    for s in states {
        let diff = s - &mu;
        var += &(&diff * &diff);
    }
    var /= n;
    let sigma = var.mapv(|v| v.sqrt().max(EPS_NORM));
    Ok(NormStats { mu, sigma })
}

impl NormStats {
    pub fn normalize(&self, s: &State) -> Array1<f64> {
        (s - &self.mu) / &self.sigma
    }
}

/// Differentiable parameterized reward family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RewardFamily {
    /// -(c1|vx - psi_x| + c2|vy - psi_y| + c3|h - psi_z|); negated so that
    /// maximizing matches the velocity target.
    VelocityMatch { coeffs: [f64; 3] },
    /// psi^T (s_next - mu) / sigma, linear in psi and in the normalized state.
    LinearState { norm: NormStats },
}

impl RewardFamily {
    /// Feature vector the velocity family scores: (vel_x, vel_y, pos_y-as-height).
    fn velocity_features(s_next: &State) -> [f64; 3] {
        [s_next[2], s_next[3], s_next[1]]
    }

    pub fn check_psi(&self, psi: &Array1<f64>) -> Result<()> {
        match self {
            RewardFamily::VelocityMatch { .. } => {
                if psi.len() != 2 && psi.len() != 3 {
                    return Err(AdmrlError::Input(format!(
                        "velocity_match expects psi of dim 2 or 3, got {}",
                        psi.len()
                    )));
                }
            }
            RewardFamily::LinearState { norm } => {
                if psi.len() != norm.mu.len() {
                    return Err(AdmrlError::Input(format!(
                        "linear_state expects psi of dim {}, got {}",
                        norm.mu.len(),
                        psi.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn reward(
        &self,
        psi: &Array1<f64>,
        _s: &State,
        _a: &Action,
        s_next: &State,
    ) -> Result<f64> {
        self.check_psi(psi)?;
        match self {
            RewardFamily::VelocityMatch { coeffs } => {
                let f = Self::velocity_features(s_next);
                let mut cost = 0.0;
                for i in 0..psi.len() {
                    cost += coeffs[i] * (f[i] - psi[i]).abs();
                }
                Ok(-cost)
            }
            RewardFamily::LinearState { norm } => Ok(psi.dot(&norm.normalize(s_next))),
        }
    }

    /// Gradient of `reward` w.r.t. psi; |.| kinks use sign(0) = 0.
    pub fn reward_grad_psi(
        &self,
        psi: &Array1<f64>,
        _s: &State,
        _a: &Action,
        s_next: &State,
    ) -> Result<Array1<f64>> {
        self.check_psi(psi)?;
        match self {
            RewardFamily::VelocityMatch { coeffs } => {
                let f = Self::velocity_features(s_next);
                let g = Array1::from_iter((0..psi.len()).map(|i| {
                    let d = f[i] - psi[i];
                    let sign = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    coeffs[i] * sign
                }));
                Ok(g)
            }
            RewardFamily::LinearState { norm } => Ok(norm.normalize(s_next)),
        }
    }

    pub fn psi_dim(&self, default_velocity_dim: usize) -> usize {
        match self {
            RewardFamily::VelocityMatch { .. } => default_velocity_dim,
            RewardFamily::LinearState { norm } => norm.mu.len(),
        }
    }
}

/// A reward family seen through the task-parameter interface: value and
/// psi-gradient at a transition. Implemented by `RewardFamily` and by the
/// tabular oracle's linear feature rewards.
pub trait TaskReward {
    fn psi_len(&self) -> usize;
    fn reward_at(&self, psi: &Array1<f64>, s: &State, a: &Action, s_next: &State) -> Result<f64>;
    fn reward_grad_at(
        &self,
        psi: &Array1<f64>,
        s: &State,
        a: &Action,
        s_next: &State,
    ) -> Result<Array1<f64>>;
}

impl TaskReward for RewardFamily {
    fn psi_len(&self) -> usize {
        self.psi_dim(2)
    }

    fn reward_at(&self, psi: &Array1<f64>, s: &State, a: &Action, s_next: &State) -> Result<f64> {
        self.reward(psi, s, a, s_next)
    }

    fn reward_grad_at(
        &self,
        psi: &Array1<f64>,
        s: &State,
        a: &Action,
        s_next: &State,
    ) -> Result<Array1<f64>> {
        self.reward_grad_psi(psi, s, a, s_next)
    }
}

/// Dynamics abstraction shared by the true environment and the learned model.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> State;
    fn step(&self, s: &State, a: &Action, rng: &mut ChaCha8Rng) -> Result<State>;
    /// True environments consume the real-sample budget; models do not.
    fn is_real(&self) -> bool;
}

/// Clipped double integrator: vel' = clip(vel + a*dt, +-v_max), pos' = pos + vel'*dt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointMass2D {
    pub dt: f64,
    pub v_max: f64,
}

impl Default for PointMass2D {
    fn default() -> Self {
        PointMass2D { dt: 0.1, v_max: 5.0 }
    }
}

impl PointMass2D {
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;
}

impl Dynamics for PointMass2D {
    fn state_dim(&self) -> usize {
        Self::STATE_DIM
    }

    fn action_dim(&self) -> usize {
        Self::ACTION_DIM
    }

    fn reset(&self, _rng: &mut ChaCha8Rng) -> State {
        Array1::zeros(4)
    }

    fn step(&self, s: &State, a: &Action, _rng: &mut ChaCha8Rng) -> Result<State> {
        if a.len() != 2 || a.iter().any(|v| !v.is_finite()) {
            return Err(AdmrlError::Input("action must be a finite 2-vector".into()));
        }
        let ax = a[0].clamp(-1.0, 1.0);
        let ay = a[1].clamp(-1.0, 1.0);
        let vx = (s[2] + ax * self.dt).clamp(-self.v_max, self.v_max);
        let vy = (s[3] + ay * self.dt).clamp(-self.v_max, self.v_max);
        let px = s[0] + vx * self.dt;
        let py = s[1] + vy * self.dt;
        Ok(ndarray::array![px, py, vx, vy])
    }

    fn is_real(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn step_from_origin() {
        let env = PointMass2D::default();
        let s = env.step(&array![0.0, 0.0, 0.0, 0.0], &array![1.0, 0.0], &mut rng()).unwrap();
        assert_abs_diff_eq!(s[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.0);
        assert_abs_diff_eq!(s[2], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s[3], 0.0);
    }

    #[test]
    fn step_zero_action_zero_velocity_is_fixed_point() {
        let env = PointMass2D::default();
        let s0 = array![1.0, 1.0, 0.0, 0.0];
        let s = env.step(&s0, &array![0.0, 0.0], &mut rng()).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn step_clips_velocity() {
        let env = PointMass2D::default();
        let s = env.step(&array![0.0, 0.0, 5.0, 0.0], &array![1.0, 0.0], &mut rng()).unwrap();
        assert_abs_diff_eq!(s[2], 5.0);
    }

    #[test]
    fn step_rejects_non_finite_action() {
        let env = PointMass2D::default();
        assert!(env.step(&array![0.0, 0.0, 0.0, 0.0], &array![f64::NAN, 0.0], &mut rng()).is_err());
    }

    #[test]
    fn velocity_reward_ant2d_coefficients() {
        // Ant2D column: c1=c2=1, c3=0.
        let fam = RewardFamily::VelocityMatch { coeffs: [1.0, 1.0, 0.0] };
        let s = array![0.0, 0.0, 0.0, 0.0];
        let a = array![0.0, 0.0];
        let r = fam.reward(&array![3.0, 3.0], &s, &a, &s).unwrap();
        assert_abs_diff_eq!(r, -6.0);
    }

    #[test]
    fn velocity_reward_zero_at_exact_match() {
        let fam = RewardFamily::VelocityMatch { coeffs: [1.0, 1.0, 0.0] };
        let s_next = array![0.0, 0.0, 1.0, 0.0];
        let r = fam
            .reward(&array![1.0, 0.0], &array![0.0, 0.0, 0.0, 0.0], &array![0.0, 0.0], &s_next)
            .unwrap();
        assert_abs_diff_eq!(r, 0.0);
    }

    #[test]
    fn linear_state_reward_basis_vector() {
        let norm = NormStats { mu: Array1::zeros(4), sigma: Array1::ones(4) };
        let fam = RewardFamily::LinearState { norm };
        let s_next = array![0.5, -1.0, 2.0, 0.0];
        let r = fam
            .reward(
                &array![1.0, 0.0, 0.0, 0.0],
                &Array1::zeros(4),
                &array![0.0, 0.0],
                &s_next,
            )
            .unwrap();
        assert_abs_diff_eq!(r, 0.5);
    }

    #[test]
    fn reward_dimension_mismatch_rejected() {
        let fam = RewardFamily::VelocityMatch { coeffs: [1.0, 1.0, 0.0] };
        let s = array![0.0, 0.0, 0.0, 0.0];
        assert!(fam.reward(&array![1.0, 2.0, 3.0, 4.0], &s, &array![0.0, 0.0], &s).is_err());
    }

    #[test]
    fn grad_psi_subgradient_convention() {
        let fam = RewardFamily::VelocityMatch { coeffs: [1.0, 1.0, 0.0] };
        let s_next = array![0.0, 0.0, 2.0, 0.0];
        let g = fam
            .reward_grad_psi(
                &array![1.0, 0.0],
                &Array1::zeros(4),
                &array![0.0, 0.0],
                &s_next,
            )
            .unwrap();
        assert_eq!(g, array![1.0, 0.0]);
        // At the kink sign(0) = 0.
        let g0 = fam
            .reward_grad_psi(
                &array![2.0, 0.0],
                &Array1::zeros(4),
                &array![0.0, 0.0],
                &s_next,
            )
            .unwrap();
        assert_eq!(g0[0], 0.0);
    }

    #[test]
    fn grad_psi_matches_central_differences_away_from_kinks() {
        let families = [
            RewardFamily::VelocityMatch { coeffs: [1.0, 1.0, 0.0] },
            RewardFamily::LinearState {
                norm: NormStats {
                    mu: array![0.1, -0.2, 0.0, 0.3],
                    sigma: array![1.0, 0.5, 2.0, 1.5],
                },
            },
        ];
        let s = array![0.2, -0.4, 0.7, 1.3];
        let a = array![0.1, -0.1];
        let s_next = array![0.25, -0.35, 0.8, 1.2];
        for fam in &families {
            let k = match fam {
                RewardFamily::VelocityMatch { .. } => 2,
                RewardFamily::LinearState { .. } => 4,
            };
            let psi = Array1::from_iter((0..k).map(|i| 0.31 + 0.17 * i as f64));
            let g = fam.reward_grad_psi(&psi, &s, &a, &s_next).unwrap();
            let delta = 1e-5;
            for i in 0..k {
                let mut pp = psi.clone();
                pp[i] += delta;
                let mut pm = psi.clone();
                pm[i] -= delta;
                let fd = (fam.reward(&pp, &s, &a, &s_next).unwrap()
                    - fam.reward(&pm, &s, &a, &s_next).unwrap())
                    / (2.0 * delta);
                assert_abs_diff_eq!(g[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normalize_stats_two_points() {
        let stats = normalize_stats(&[array![0.0], array![2.0]]).unwrap();
        assert_abs_diff_eq!(stats.mu[0], 1.0);
        assert_abs_diff_eq!(stats.sigma[0], 1.0);
    }

    #[test]
    fn normalize_stats_degenerate_floor() {
        let stats = normalize_stats(&[array![3.0], array![3.0], array![3.0]]).unwrap();
        assert_abs_diff_eq!(stats.sigma[0], EPS_NORM);
    }

    #[test]
    fn normalize_stats_rejects_single_state() {
        assert!(normalize_stats(&[array![0.0]]).is_err());
    }

    #[test]
    fn normalize_stats_gaussian_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng();
        let states: Vec<State> = (0..1000)
            .map(|_| array![StandardNormal.sample(&mut r)])
            .collect();
        let stats = normalize_stats(&states).unwrap();
        assert!(stats.mu[0].abs() < 0.1);
        assert!(stats.sigma[0] > 0.9 && stats.sigma[0] < 1.1);
    }

    #[test]
    fn project_task_clips() {
        let b = TaskBox::symmetric(2, 3.0);
        let t = project_task(&b, &array![4.0, -5.0]).unwrap();
        assert_eq!(t.psi, array![3.0, -3.0]);
    }

    #[test]
    fn project_task_rejects_non_finite() {
        let b = TaskBox::symmetric(2, 3.0);
        assert!(project_task(&b, &array![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn step_deterministic_given_seed() {
        let env = PointMass2D::default();
        let mut s1 = env.reset(&mut rng());
        let mut s2 = env.reset(&mut rng());
        let mut r1 = rng();
        let mut r2 = rng();
        for i in 0..20 {
            let a = array![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()];
            s1 = env.step(&s1, &a, &mut r1).unwrap();
            s2 = env.step(&s2, &a, &mut r2).unwrap();
        }
        assert_eq!(s1, s2);
    }

    proptest! {
        #[test]
        fn project_is_idempotent_and_feasible(
            x in -10.0f64..10.0, y in -10.0f64..10.0
        ) {
            let b = TaskBox::symmetric(2, 3.0);
            let once = project_task(&b, &array![x, y]).unwrap();
            let twice = project_task(&b, &once.psi).unwrap();
            prop_assert_eq!(&once.psi, &twice.psi);
            prop_assert!(b.contains(&once.psi));
        }

        #[test]
        fn linear_state_reward_is_linear_in_psi(
            a1 in -2.0f64..2.0, a2 in -2.0f64..2.0,
            p in -1.0f64..1.0, q in -1.0f64..1.0
        ) {
            let norm = NormStats {
                mu: array![0.0, 0.0, 0.0, 0.0],
                sigma: array![1.0, 2.0, 0.5, 1.0],
            };
            let fam = RewardFamily::LinearState { norm };
            let s = array![0.1, 0.2, -0.3, 0.4];
            let act = array![0.0, 0.0];
            let psi1 = array![p, q, p * 0.5, q - 0.1];
            let psi2 = array![q, -p, 0.3, p + q];
            let lhs = fam.reward(&(&psi1 * a1 + &psi2 * a2), &s, &act, &s).unwrap();
            let rhs = a1 * fam.reward(&psi1, &s, &act, &s).unwrap()
                + a2 * fam.reward(&psi2, &s, &act, &s).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
