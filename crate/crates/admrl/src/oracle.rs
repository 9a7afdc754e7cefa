//! Ground-truth machinery: a tabular MDP with softmax policy where the
//! return, its gradients, Hessians and the implicit Jacobian are computable
//! exactly. Every sampled estimator in the crate is validated against this.

use crate::envs::{Action, Dynamics, State, TaskReward};
use crate::error::{AdmrlError, Result};
use crate::math::solve_dense;
use crate::policy::Policy;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Finite MDP with linear reward features: r_psi(s,a,s') = psi . f(s,a,s').
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Transition tensor indexed (s, a, s'), each row summing to 1.
    pub trans: Array3<f64>,
    /// Reward feature map indexed (s, a, s', k).
    pub features: Array4<f64>,
    pub p0: Array1<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(
        trans: Array3<f64>,
        features: Array4<f64>,
        p0: Array1<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let (n, m, n2) = trans.dim();
        if n != n2 || p0.len() != n {
            return Err(AdmrlError::Input("transition tensor must be (N, M, N)".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(AdmrlError::Input("gamma must be in [0, 1)".into()));
        }
        for s in 0..n {
            for a in 0..m {
                let row_sum: f64 = (0..n).map(|t| trans[[s, a, t]]).sum();
                if (row_sum - 1.0).abs() > 1e-12 {
                    return Err(AdmrlError::Input(format!(
                        "P(.|{s},{a}) sums to {row_sum}, not 1"
                    )));
                }
            }
        }
        let p0_sum: f64 = p0.sum();
        if (p0_sum - 1.0).abs() > 1e-12 {
            return Err(AdmrlError::Input("p0 must sum to 1".into()));
        }
        Ok(TabularMdp { n_states: n, n_actions: m, trans, features, p0, gamma })
    }

    /// Default oracle instance: N=5, M=2, k=2, gamma=0.9, seeded.
    pub fn random(seed: u64, n: usize, m: usize, k: usize, gamma: f64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trans = Array3::zeros((n, m, n));
        for s in 0..n {
            for a in 0..m {
                let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                // Renormalize exactly so validation at 1e-12 holds.
                let resum: f64 = row.iter().sum();
                row[n - 1] += 1.0 - resum;
                for t in 0..n {
                    trans[[s, a, t]] = row[t];
                }
            }
        }
        let mut features = Array4::zeros((n, m, n, k));
        for v in features.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let p0 = Array1::from_elem(n, 1.0 / n as f64);
        TabularMdp::new(trans, features, p0, gamma).unwrap()
    }

    pub fn default_oracle(seed: u64) -> Self {
        Self::random(seed, 5, 2, 2, 0.9)
    }

    pub fn psi_dim(&self) -> usize {
        self.features.dim().3
    }

    /// Expected reward r_psi(s, a) = sum_{s'} P(s'|s,a) psi.f(s,a,s').
    pub fn expected_reward(&self, psi: &Array1<f64>, s: usize, a: usize) -> f64 {
        let mut r = 0.0;
        for t in 0..self.n_states {
            let mut dot = 0.0;
            for j in 0..psi.len() {
                dot += psi[j] * self.features[[s, a, t, j]];
            }
            r += self.trans[[s, a, t]] * dot;
        }
        r
    }

    /// Expected feature vector F(s, a) = sum_{s'} P(s'|s,a) f(s,a,s').
    pub fn expected_features(&self, s: usize, a: usize) -> Array1<f64> {
        let k = self.psi_dim();
        let mut f = Array1::zeros(k);
        for t in 0..self.n_states {
            for j in 0..k {
                f[j] += self.trans[[s, a, t]] * self.features[[s, a, t, j]];
            }
        }
        f
    }
}

/// Tabular softmax policy over per-state logits; optional entropy bonus
/// weight beta makes the inner problem strictly concave in distribution
/// space, giving a unique optimum for the implicit-Jacobian oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub n_states: usize,
    pub n_actions: usize,
}

impl SoftmaxPolicy {
    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        SoftmaxPolicy { n_states: mdp.n_states, n_actions: mdp.n_actions }
    }

    pub fn probs(&self, theta: &[f64], s: usize) -> Array1<f64> {
        let row = &theta[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Array1::from_iter(exps.into_iter().map(|v| v / sum))
    }

    /// Full action-probability table, the gauge-free representation used for
    /// uniqueness and implicit-Jacobian comparisons.
    pub fn prob_table(&self, theta: &[f64]) -> Array2<f64> {
        let mut table = Array2::zeros((self.n_states, self.n_actions));
        for s in 0..self.n_states {
            table.row_mut(s).assign(&self.probs(theta, s));
        }
        table
    }

    fn state_of(s: &State) -> usize {
        s[0] as usize
    }

    fn action_of(a: &Action) -> usize {
        a[0] as usize
    }
}

impl Policy for SoftmaxPolicy {
    fn num_params(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.num_params()).map(|_| rng.gen_range(-0.1..0.1)).collect()
    }

    fn sample_action(&self, theta: &[f64], s: &State, rng: &mut ChaCha8Rng) -> Action {
        let probs = self.probs(theta, Self::state_of(s));
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut pick = self.n_actions - 1;
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = a;
                break;
            }
        }
        ndarray::array![pick as f64]
    }

    fn log_prob(&self, theta: &[f64], s: &State, a: &Action) -> f64 {
        let si = Self::state_of(s);
        let probs = self.probs(theta, si);
        probs[Self::action_of(a)].ln()
    }

    fn grad_log_prob(&self, theta: &[f64], s: &State, a: &Action) -> Array1<f64> {
        let si = Self::state_of(s);
        let ai = Self::action_of(a);
        let probs = self.probs(theta, si);
        let mut g = Array1::zeros(self.num_params());
        for b in 0..self.n_actions {
            g[si * self.n_actions + b] = (if b == ai { 1.0 } else { 0.0 }) - probs[b];
        }
        g
    }

    fn logp_hvp(
        &self,
        theta: &[f64],
        batch: &[(State, Action, f64)],
        x: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        if x.len() != self.num_params() {
            return Err(AdmrlError::Input("logp_hvp direction dimension mismatch".into()));
        }
        let mut out = Array1::zeros(self.num_params());
        // Per-pair Hessian block at state s: -(diag(pi) - pi pi^T), action-free.
        for (s, _a, w) in batch {
            let si = Self::state_of(s);
            let probs = self.probs(theta, si);
            let base = si * self.n_actions;
            let mut pix = 0.0;
            for b in 0..self.n_actions {
                pix += probs[b] * x[base + b];
            }
            for b in 0..self.n_actions {
                out[base + b] -= w * probs[b] * (x[base + b] - pix);
            }
        }
        Ok(out)
    }

    fn mean_kl(&self, theta_old: &[f64], theta_new: &[f64], states: &[State]) -> f64 {
        let mut total = 0.0;
        for s in states {
            let si = Self::state_of(s);
            let po = self.probs(theta_old, si);
            let pn = self.probs(theta_new, si);
            for a in 0..self.n_actions {
                if po[a] > 0.0 {
                    total += po[a] * (po[a] / pn[a]).ln();
                }
            }
        }
        total / states.len() as f64
    }
}

impl Dynamics for TabularMdp {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for s in 0..self.n_states {
            acc += self.p0[s];
            if u < acc {
                return ndarray::array![s as f64];
            }
        }
        ndarray::array![(self.n_states - 1) as f64]
    }

    fn step(&self, s: &State, a: &Action, rng: &mut ChaCha8Rng) -> Result<State> {
        let si = s[0] as usize;
        let ai = a[0] as usize;
        if si >= self.n_states || ai >= self.n_actions {
            return Err(AdmrlError::Input("tabular state/action out of range".into()));
        }
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for t in 0..self.n_states {
            acc += self.trans[[si, ai, t]];
            if u < acc {
                return Ok(ndarray::array![t as f64]);
            }
        }
        Ok(ndarray::array![(self.n_states - 1) as f64])
    }

    fn is_real(&self) -> bool {
        true
    }
}

impl TaskReward for TabularMdp {
    fn psi_len(&self) -> usize {
        self.psi_dim()
    }

    fn reward_at(&self, psi: &Array1<f64>, s: &State, a: &Action, s_next: &State) -> Result<f64> {
        let (si, ai, ti) = (s[0] as usize, a[0] as usize, s_next[0] as usize);
        let mut r = 0.0;
        for j in 0..psi.len() {
            r += psi[j] * self.features[[si, ai, ti, j]];
        }
        Ok(r)
    }

    fn reward_grad_at(
        &self,
        psi: &Array1<f64>,
        s: &State,
        a: &Action,
        s_next: &State,
    ) -> Result<Array1<f64>> {
        let (si, ai, ti) = (s[0] as usize, a[0] as usize, s_next[0] as usize);
        Ok(Array1::from_iter(
            (0..psi.len()).map(|j| self.features[[si, ai, ti, j]]),
        ))
    }
}

fn entropy(probs: &Array1<f64>) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Policy-averaged transition matrix P_pi and reward vector r_pi (with the
/// beta-weighted entropy bonus folded into the reward).
fn policy_averaged(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    theta: &[f64],
    psi: &Array1<f64>,
    beta: f64,
) -> (Array2<f64>, Array1<f64>) {
    let n = mdp.n_states;
    let mut p_pi = Array2::zeros((n, n));
    let mut r_pi = Array1::zeros(n);
    for s in 0..n {
        let probs = policy.probs(theta, s);
        for a in 0..mdp.n_actions {
            for t in 0..n {
                p_pi[[s, t]] += probs[a] * mdp.trans[[s, a, t]];
            }
            r_pi[s] += probs[a] * mdp.expected_reward(psi, s, a);
        }
        if beta > 0.0 {
            r_pi[s] += beta * entropy(&probs);
        }
    }
    (p_pi, r_pi)
}

/// Exact return eta = p0^T (I - gamma P_pi)^{-1} r_pi via direct solve.
pub fn exact_return(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    theta: &[f64],
    psi: &Array1<f64>,
    beta: f64,
) -> Result<f64> {
    let (p_pi, r_pi) = policy_averaged(mdp, policy, theta, psi, beta);
    let n = mdp.n_states;
    let mut sys = Array2::eye(n);
    sys.scaled_add(-mdp.gamma, &p_pi);
    let v = solve_dense(&sys, &r_pi)
        .ok_or_else(|| AdmrlError::Numeric("singular (I - gamma P_pi) system".into()))?;
    Ok(mdp.p0.dot(&v))
}

/// Unnormalized discounted state occupancy d = (I - gamma P_pi^T)^{-1} p0.
pub fn occupancy(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    theta: &[f64],
    psi: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (p_pi, _) = policy_averaged(mdp, policy, theta, psi, 0.0);
    let n = mdp.n_states;
    let mut sys = Array2::eye(n);
    sys.scaled_add(-mdp.gamma, &p_pi.t().to_owned());
    solve_dense(&sys, &mdp.p0)
        .ok_or_else(|| AdmrlError::Numeric("singular occupancy system".into()))
}

#[derive(Clone, Copy, Debug)]
pub enum GradWrt {
    Theta,
    Psi,
}

/// Central finite differences with one step of Richardson extrapolation.
fn richardson_fd(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Array1<f64>> {
    let mut grad = Array1::zeros(x.len());
    let central = |x: &mut Vec<f64>, i: usize, d: f64, f: &mut dyn FnMut(&[f64]) -> Result<f64>| -> Result<f64> {
        x[i] += d;
        let fp = f(x)?;
        x[i] -= 2.0 * d;
        let fm = f(x)?;
        x[i] += d;
        Ok((fp - fm) / (2.0 * d))
    };
    let mut xv = x.to_vec();
    for i in 0..x.len() {
        let d1 = central(&mut xv, i, 1e-4, f)?;
        let d2 = central(&mut xv, i, 5e-5, f)?;
        grad[i] = (4.0 * d2 - d1) / 3.0;
    }
    Ok(grad)
}

/// Exact gradient of `exact_return`. For theta: Richardson-extrapolated
/// central differences. For psi: the analytic occupancy-weighted feature
/// form (the return is linear in psi).
pub fn exact_grad(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    theta: &[f64],
    psi: &Array1<f64>,
    beta: f64,
    wrt: GradWrt,
) -> Result<Array1<f64>> {
    match wrt {
        GradWrt::Theta => richardson_fd(
            &mut |t: &[f64]| exact_return(mdp, policy, t, psi, beta),
            theta,
        ),
        GradWrt::Psi => {
            let d = occupancy(mdp, policy, theta, psi)?;
            let mut g = Array1::zeros(psi.len());
            for s in 0..mdp.n_states {
                let probs = policy.probs(theta, s);
                for a in 0..mdp.n_actions {
                    let f = mdp.expected_features(s, a);
                    g.scaled_add(d[s] * probs[a], &f);
                }
            }
            Ok(g)
        }
    }
}

/// psi-gradient by finite differences, for cross-checking the analytic form.
pub fn exact_grad_psi_fd(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    theta: &[f64],
    psi: &Array1<f64>,
    beta: f64,
) -> Result<Array1<f64>> {
    richardson_fd(
        &mut |p: &[f64]| exact_return(mdp, policy, theta, &Array1::from_vec(p.to_vec()), beta),
        psi.as_slice().unwrap(),
    )
}

/// Analytic gradient of the entropy-regularized return w.r.t. softmax
/// logits, via the soft policy-gradient theorem. Used by `resolve_inner`,
/// where finite-difference noise would sit above the 1e-10 gate.
pub fn soft_policy_grad(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    theta: &[f64],
    psi: &Array1<f64>,
    beta: f64,
) -> Result<Array1<f64>> {
    let n = mdp.n_states;
    let m = mdp.n_actions;
    let (p_pi, r_pi) = policy_averaged(mdp, policy, theta, psi, beta);
    let mut sys = Array2::eye(n);
    sys.scaled_add(-mdp.gamma, &p_pi);
    let v = solve_dense(&sys, &r_pi)
        .ok_or_else(|| AdmrlError::Numeric("singular value system".into()))?;
    let d = occupancy(mdp, policy, theta, psi)?;
    let mut grad = Array1::zeros(n * m);
    for s in 0..n {
        let probs = policy.probs(theta, s);
        let mut q = Array1::zeros(m);
        for a in 0..m {
            let mut next = 0.0;
            for t in 0..n {
                next += mdp.trans[[s, a, t]] * v[t];
            }
            q[a] = mdp.expected_reward(psi, s, a) - beta * probs[a].ln() + mdp.gamma * next;
        }
        let v_soft: f64 = (0..m).map(|a| probs[a] * q[a]).sum();
        for b in 0..m {
            grad[s * m + b] = d[s] * probs[b] * (q[b] - v_soft);
        }
    }
    Ok(grad)
}

/// Symmetric central-difference Hessian of a scalar function.
pub fn fd_hessian(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], delta: f64) -> Array2<f64> {
    let p = x.len();
    let mut h = Array2::zeros((p, p));
    let mut xv = x.to_vec();
    let eval = |xv: &mut Vec<f64>, i: usize, j: usize, si: f64, sj: f64, f: &mut dyn FnMut(&[f64]) -> f64| {
        xv[i] += si * delta;
        xv[j] += sj * delta;
        let v = f(xv);
        xv[i] -= si * delta;
        xv[j] -= sj * delta;
        v
    };
    for i in 0..p {
        for j in i..p {
            let val = (eval(&mut xv, i, j, 1.0, 1.0, f) - eval(&mut xv, i, j, 1.0, -1.0, f)
                - eval(&mut xv, i, j, -1.0, 1.0, f)
                + eval(&mut xv, i, j, -1.0, -1.0, f))
                / (4.0 * delta * delta);
            h[[i, j]] = val;
            h[[j, i]] = val;
        }
    }
    // Symmetrize against accumulated float error.
    let ht = h.t().to_owned();
    (&h + &ht) * 0.5
}

/// Inner optimum theta_hat = argmax eta + beta * entropy, by exact-gradient
/// ascent with backtracking, down to gradient norm < 1e-10.
pub fn resolve_inner(
    mdp: &TabularMdp,
    psi: &Array1<f64>,
    beta: f64,
    budget: usize,
    theta0: &[f64],
) -> Result<Vec<f64>> {
    if beta <= 0.0 {
        return Err(AdmrlError::Input("resolve_inner requires beta > 0".into()));
    }
    let policy = SoftmaxPolicy::for_mdp(mdp);
    let mut theta = theta0.to_vec();
    let mut grad = soft_policy_grad(mdp, &policy, &theta, psi, beta)?;
    let mut gnorm = grad.dot(&grad).sqrt();
    let mut value = exact_return(mdp, &policy, &theta, psi, beta)?;
    let mut lr = 1.0;
    let tol = 1e-10;
    // Two-phase acceptance: ascend on the objective while improvements are
    // resolvable in double precision, then contract the gradient norm.
    let mut norm_phase = false;
    for _ in 0..budget {
        if gnorm < tol {
            return Ok(theta);
        }
        let mut stepped = false;
        for _ in 0..80 {
            let cand: Vec<f64> =
                theta.iter().zip(grad.iter()).map(|(&t, &g)| t + lr * g).collect();
            let accept = if norm_phase {
                let cand_grad = soft_policy_grad(mdp, &policy, &cand, psi, beta)?;
                let cand_norm = cand_grad.dot(&cand_grad).sqrt();
                if cand_norm < gnorm {
                    theta = cand;
                    grad = cand_grad;
                    gnorm = cand_norm;
                    true
                } else {
                    false
                }
            } else {
                let cand_val = exact_return(mdp, &policy, &cand, psi, beta)?;
                if cand_val > value {
                    theta = cand;
                    value = cand_val;
                    grad = soft_policy_grad(mdp, &policy, &theta, psi, beta)?;
                    gnorm = grad.dot(&grad).sqrt();
                    true
                } else {
                    false
                }
            };
            if accept {
                lr *= 1.5;
                stepped = true;
                break;
            }
            lr *= 0.5;
        }
        if !stepped {
            if !norm_phase {
                norm_phase = true;
                lr = 1.0;
            } else {
                break;
            }
        }
    }
    let grad = soft_policy_grad(mdp, &policy, &theta, psi, beta)?;
    let gnorm = grad.dot(&grad).sqrt();
    if gnorm < tol {
        Ok(theta)
    } else {
        Err(AdmrlError::Numeric(format!(
            "resolve_inner budget exhausted at gradient norm {gnorm:.3e}"
        )))
    }
}
