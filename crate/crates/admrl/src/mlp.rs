//! Minimal MLP with a flat parameter vector, written generically over the
//! scalar type so the same backward pass yields exact Hessian-vector
//! products when run in dual-number arithmetic.

use crate::math::Scalar;
use serde::{Deserialize, Serialize};

/// Feed-forward architecture: `sizes = [in, hidden.., out]`, tanh on hidden
/// layers, linear output. Parameters are stored flat as
/// `[W0 (out x in, row-major), b0, W1, b1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
}

/// Forward-pass activations kept for the backward pass.
pub struct MlpCache<T> {
    /// Post-activation of every layer, `acts[0]` being the input.
    pub acts: Vec<Vec<T>>,
}

impl MlpArch {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2);
        MlpArch { sizes }
    }

    pub fn num_params(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        self.forward_cache(params, x).acts.pop().unwrap()
    }

    pub fn forward_cache<T: Scalar>(&self, params: &[T], x: &[T]) -> MlpCache<T> {
        assert_eq!(params.len(), self.num_params());
        assert_eq!(x.len(), self.sizes[0]);
        let n_layers = self.sizes.len() - 1;
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + nout * nin];
            let b = &params[off + nout * nin..off + nout * nin + nout];
            off += nout * nin + nout;
            let prev = &acts[l];
            let mut out = Vec::with_capacity(nout);
            for i in 0..nout {
                let mut z = b[i];
                let row = &w[i * nin..(i + 1) * nin];
                for j in 0..nin {
                    z = z + row[j] * prev[j];
                }
                if l + 1 < n_layers {
                    z = z.tanh();
                }
                out.push(z);
            }
            acts.push(out);
        }
        MlpCache { acts }
    }

    /// Vector-Jacobian product: accumulates `scale * d(cot . output)/dparams`
    /// into `grad` (same layout as `params`). Returns the input cotangent.
    pub fn vjp<T: Scalar>(
        &self,
        params: &[T],
        cache: &MlpCache<T>,
        cot_out: &[T],
        scale: T,
        grad: &mut [T],
    ) -> Vec<T> {
        assert_eq!(grad.len(), self.num_params());
        let n_layers = self.sizes.len() - 1;
        // Parameter offsets per layer.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l + 1] * self.sizes[l] + self.sizes[l + 1];
        }
        let mut cot: Vec<T> = cot_out.to_vec();
        for l in (0..n_layers).rev() {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            // Hidden layers: cotangent passes through tanh'.
            if l + 1 < n_layers {
                let a = &cache.acts[l + 1];
                for i in 0..nout {
                    cot[i] = cot[i] * (T::from_f64(1.0) - a[i] * a[i]);
                }
            }
            let prev = &cache.acts[l];
            let w = &params[off..off + nout * nin];
            let (gw, gb) = grad[off..off + nout * nin + nout].split_at_mut(nout * nin);
            let mut cot_in = vec![T::zero(); nin];
            for i in 0..nout {
                let ci = cot[i] * scale;
                let row = &w[i * nin..(i + 1) * nin];
                let grow = &mut gw[i * nin..(i + 1) * nin];
                for j in 0..nin {
                    grow[j] = grow[j] + ci * prev[j];
                    cot_in[j] = cot_in[j] + cot[i] * row[j];
                }
                gb[i] = gb[i] + ci;
            }
            cot = cot_in;
        }
        cot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_params(arch: &MlpArch, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..arch.num_params()).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn forward_linear_net_is_affine() {
        let arch = MlpArch::new(vec![2, 1]);
        // y = 3x0 - x1 + 0.5
        let params = vec![3.0, -1.0, 0.5];
        let y = arch.forward(&params, &[2.0, 4.0]);
        assert_relative_eq!(y[0], 2.5, epsilon = 1e-14);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let arch = MlpArch::new(vec![3, 5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = rand_params(&arch, &mut rng);
        let x = [0.3, -0.2, 0.9];
        let cot = [1.0, -0.7];
        let mut grad = vec![0.0; arch.num_params()];
        let cache = arch.forward_cache(&params, &x);
        arch.vjp(&params, &cache, &cot, 1.0, &mut grad);
        let f = |p: &[f64]| {
            let y = arch.forward(p, &x);
            cot[0] * y[0] + cot[1] * y[1]
        };
        let eps = 1e-6;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += eps;
            let mut pm = params.clone();
            pm[i] -= eps;
            let fd = (f(&pp) - f(&pm)) / (2.0 * eps);
            assert_relative_eq!(grad[i], fd, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn dual_forward_tangent_matches_fd() {
        use crate::math::Dual;
        let arch = MlpArch::new(vec![2, 4, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = rand_params(&arch, &mut rng);
        let dir: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = [0.5, -1.0];
        let dual_params: Vec<Dual> =
            params.iter().zip(&dir).map(|(&v, &t)| Dual::new(v, t)).collect();
        let xd = [Dual::constant(0.5), Dual::constant(-1.0)];
        let y = arch.forward(&dual_params, &xd);
        let eps = 1e-6;
        let shift = |s: f64| {
            let p: Vec<f64> = params.iter().zip(&dir).map(|(&v, &t)| v + s * t).collect();
            arch.forward(&p, &x)[0]
        };
        let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
        assert_relative_eq!(y[0].t, fd, max_relative = 1e-6, epsilon = 1e-9);
    }
}
