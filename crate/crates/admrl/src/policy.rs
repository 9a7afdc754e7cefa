//! Gaussian MLP policy with analytic score functions and exact second-order
//! directional derivatives of the log-density (forward-over-reverse).

use crate::envs::{Action, State};
use crate::error::{AdmrlError, Result};
use crate::math::{orthogonal_init, Dual, Scalar};
use crate::mlp::MlpArch;
use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

/// Common surface over policy classes used by the estimators: scores,
/// log-densities and exact log-prob Hessian-vector products.
pub trait Policy {
    fn num_params(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    /// Fresh random parameters for this policy class.
    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn sample_action(&self, theta: &[f64], s: &State, rng: &mut ChaCha8Rng) -> Action;
    fn log_prob(&self, theta: &[f64], s: &State, a: &Action) -> f64;
    fn grad_log_prob(&self, theta: &[f64], s: &State, a: &Action) -> Array1<f64>;
    /// (d^2/dtheta^2 sum_i w_i log pi(a_i|s_i)) . x, exact up to float error.
    fn logp_hvp(
        &self,
        theta: &[f64],
        batch: &[(State, Action, f64)],
        x: &Array1<f64>,
    ) -> Result<Array1<f64>>;
    /// Mean KL(pi_old || pi_new) over the given states.
    fn mean_kl(&self, theta_old: &[f64], theta_new: &[f64], states: &[State]) -> f64;
}

/// Diagonal-Gaussian policy: MLP mean network plus a state-independent
/// log-std vector appended to the flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianMlpPolicy {
    pub arch: MlpArch,
}

impl GaussianMlpPolicy {
    /// Default architecture: one tanh hidden layer of width 32.
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        GaussianMlpPolicy { arch: MlpArch::new(sizes) }
    }

    pub fn default_for(obs_dim: usize, act_dim: usize) -> Self {
        Self::new(obs_dim, act_dim, &[32])
    }

    fn mlp_params_len(&self) -> usize {
        self.arch.num_params()
    }

    /// Random init: orthogonal mean-network weights scaled 0.1, log_std -0.5.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.num_params());
        for w in self.arch.sizes.windows(2) {
            let (nin, nout) = (w[0], w[1]);
            let m = orthogonal_init(nout, nin, 0.1, rng);
            theta.extend(m.iter());
            theta.extend(std::iter::repeat(0.0).take(nout));
        }
        theta.extend(std::iter::repeat(-0.5).take(self.arch.output_dim()));
        theta
    }

    pub fn mean(&self, theta: &[f64], s: &State) -> Array1<f64> {
        let out = self.arch.forward(&theta[..self.mlp_params_len()], s.as_slice().unwrap());
        Array1::from_vec(out)
    }

    fn log_std<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.mlp_params_len()..]
    }

    /// Log-density and its parameter gradient, generic in the scalar type so
    /// the dual-number pass yields exact Hessian-vector products.
    fn grad_logp_generic<T: Scalar>(
        &self,
        theta: &[T],
        s: &[f64],
        a: &[f64],
        weight: T,
        grad: &mut [T],
    ) -> T {
        let np = self.mlp_params_len();
        let d = self.arch.output_dim();
        let (mlp_theta, log_std) = theta.split_at(np);
        let sx: Vec<T> = s.iter().map(|&v| T::from_f64(v)).collect();
        let cache = self.arch.forward_cache(mlp_theta, &sx);
        let mu = cache.acts.last().unwrap().clone();
        let mut logp = T::from_f64(-0.5 * LN_2PI * d as f64);
        let mut cot = Vec::with_capacity(d);
        let (gmlp, gls) = grad.split_at_mut(np);
        for j in 0..d {
            let diff = T::from_f64(a[j]) - mu[j];
            let inv_var = (-(log_std[j] + log_std[j])).exp();
            logp = logp - T::from_f64(0.5) * diff * diff * inv_var - log_std[j];
            // dlogp/dmu_j, then chain through the mean network.
            cot.push(diff * inv_var);
            gls[j] = gls[j] + weight * (diff * diff * inv_var - T::from_f64(1.0));
        }
        self.arch.vjp(mlp_theta, &cache, &cot, weight, gmlp);
        logp
    }
}

impl Policy for GaussianMlpPolicy {
    fn num_params(&self) -> usize {
        self.arch.num_params() + self.arch.output_dim()
    }

    fn obs_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn act_dim(&self) -> usize {
        self.arch.output_dim()
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        GaussianMlpPolicy::init_params(self, rng)
    }

    fn sample_action(&self, theta: &[f64], s: &State, rng: &mut ChaCha8Rng) -> Action {
        let mu = self.mean(theta, s);
        let ls = self.log_std(theta);
        Array1::from_iter(mu.iter().zip(ls).map(|(&m, &l)| {
            let z: f64 = StandardNormal.sample(rng);
            m + l.exp() * z
        }))
    }

    fn log_prob(&self, theta: &[f64], s: &State, a: &Action) -> f64 {
        let mut scratch = vec![0.0; self.num_params()];
        self.grad_logp_generic(
            theta,
            s.as_slice().unwrap(),
            a.as_slice().unwrap(),
            0.0,
            &mut scratch,
        )
    }

    fn grad_log_prob(&self, theta: &[f64], s: &State, a: &Action) -> Array1<f64> {
        let mut grad = vec![0.0; self.num_params()];
        self.grad_logp_generic(
            theta,
            s.as_slice().unwrap(),
            a.as_slice().unwrap(),
            1.0,
            &mut grad,
        );
        Array1::from_vec(grad)
    }

    fn logp_hvp(
        &self,
        theta: &[f64],
        batch: &[(State, Action, f64)],
        x: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let p = self.num_params();
        if x.len() != p {
            return Err(AdmrlError::Input(format!(
                "logp_hvp direction has dim {}, expected {p}",
                x.len()
            )));
        }
        let dual_theta: Vec<Dual> =
            theta.iter().zip(x.iter()).map(|(&v, &t)| Dual::new(v, t)).collect();
        let mut grad = vec![Dual::constant(0.0); p];
        for (s, a, w) in batch {
            self.grad_logp_generic(
                &dual_theta,
                s.as_slice().unwrap(),
                a.as_slice().unwrap(),
                Dual::constant(*w),
                &mut grad,
            );
        }
        Ok(Array1::from_iter(grad.iter().map(|d| d.t)))
    }

    fn mean_kl(&self, theta_old: &[f64], theta_new: &[f64], states: &[State]) -> f64 {
        let d = self.act_dim();
        let ls_old = self.log_std(theta_old);
        let ls_new = self.log_std(theta_new);
        let mut total = 0.0;
        for s in states {
            let mu_old = self.mean(theta_old, s);
            let mu_new = self.mean(theta_new, s);
            for j in 0..d {
                let var_old = (2.0 * ls_old[j]).exp();
                let var_new = (2.0 * ls_new[j]).exp();
                let dm = mu_old[j] - mu_new[j];
                total += ls_new[j] - ls_old[j] + (var_old + dm * dm) / (2.0 * var_new) - 0.5;
            }
        }
        total / states.len() as f64
    }
}

/// Flat checkpoint with an architecture header, for policy serialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub sizes: Vec<usize>,
    pub theta: Vec<f64>,
}

impl PolicyCheckpoint {
    pub fn pack(policy: &GaussianMlpPolicy, theta: &[f64]) -> Self {
        PolicyCheckpoint { sizes: policy.arch.sizes.clone(), theta: theta.to_vec() }
    }

    pub fn unpack(&self) -> Result<(GaussianMlpPolicy, Vec<f64>)> {
        let policy = GaussianMlpPolicy { arch: MlpArch::new(self.sizes.clone()) };
        if self.theta.len() != policy.num_params() {
            return Err(AdmrlError::Input("checkpoint parameter count mismatch".into()));
        }
        Ok((policy, self.theta.clone()))
    }
}
