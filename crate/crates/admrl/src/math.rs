//! Small numeric building blocks: forward-mode dual numbers, dense linear
//! solves for tiny systems, orthogonal initialization and an Adam optimizer.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar abstraction so the same network/backprop code runs in plain f64
/// and in forward-mode (dual number) arithmetic for Hessian-vector products.
pub trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn zero() -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn zero() -> Self {
        0.0
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Dual number carrying a value and a single directional tangent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Dual {
    pub fn new(v: f64, t: f64) -> Self {
        Dual { v, t }
    }
    pub fn constant(v: f64) -> Self {
        Dual { v, t: 0.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.t + o.t)
    }
}
impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.t - o.t)
    }
}
impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.t + self.t * o.v)
    }
}
impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.v / o.v, (self.t * o.v - self.v * o.t) / (o.v * o.v))
    }
}
impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.t)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn zero() -> Self {
        Dual::constant(0.0)
    }
    fn tanh(self) -> Self {
        let th = self.v.tanh();
        Dual::new(th, self.t * (1.0 - th * th))
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.t * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.t / self.v)
    }
}

/// Dense Gaussian elimination with partial pivoting. Only used on tiny
/// systems (state-value solves, tabular MDPs), where LAPACK is overkill.
pub fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        if m[[piv, col]].abs() < 1e-14 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                let tmp = m[[col, c]];
                m[[col, c]] = m[[piv, c]];
                m[[piv, c]] = tmp;
            }
            x.swap(col, piv);
        }
        for r in col + 1..n {
            let f = m[[r, col]] / m[[col, col]];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[[r, c]] -= f * m[[col, c]];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m[[col, col]];
        for r in 0..col {
            x[r] -= m[[r, col]] * x[col];
        }
    }
    Some(x)
}

/// Ridge least squares: minimizes |Xw - y|^2 + ridge*|w|^2 via the normal
/// equations. Feature dimension is assumed small.
pub fn ridge_least_squares(x: &Array2<f64>, y: &Array1<f64>, ridge: f64) -> Array1<f64> {
    let d = x.ncols();
    let mut gram = x.t().dot(x);
    for i in 0..d {
        gram[[i, i]] += ridge;
    }
    let rhs = x.t().dot(y);
    solve_dense(&gram, &rhs).unwrap_or_else(|| Array1::zeros(d))
}

/// Orthogonal init (scaled) for a rows x cols weight matrix, via modified
/// Gram-Schmidt on a Gaussian draw.
pub fn orthogonal_init<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    let big = rows.max(cols);
    let small = rows.min(cols);
    let mut q: Vec<Array1<f64>> = Vec::with_capacity(small);
    let mut draws = 0;
    while q.len() < small && draws < 50 * small {
        draws += 1;
        let mut v: Array1<f64> =
            Array1::from_iter((0..big).map(|_| StandardNormal.sample(rng)));
        for u in &q {
            let proj = v.dot(u);
            v = &v - &(u * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.push(v / norm);
        }
    }
    let mut w = Array2::zeros((rows, cols));
    for (i, u) in q.iter().enumerate() {
        if rows <= cols {
            for j in 0..cols {
                w[[i, j]] = scale * u[j];
            }
        } else {
            for j in 0..rows {
                w[[j, i]] = scale * u[j];
            }
        }
    }
    w
}

/// Plain Adam over a flat parameter vector.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Applies one descent step in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

pub fn l2_norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn dual_chain_rule_through_tanh_exp() {
        // d/dx tanh(exp(x)) at x=0.3
        let x = Dual::new(0.3, 1.0);
        let y = x.exp().tanh();
        let e = 0.3f64.exp();
        let expect = e * (1.0 - e.tanh() * e.tanh());
        assert_abs_diff_eq!(y.t, expect, epsilon = 1e-14);
    }

    #[test]
    fn solve_dense_matches_hand_solution() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let b = array![3.0, 5.0];
        let x = solve_dense(&a, &b).unwrap();
        assert_abs_diff_eq!(x[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 1.4, epsilon = 1e-12);
    }

    #[test]
    fn solve_dense_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let b = array![1.0, 2.0];
        assert!(solve_dense(&a, &b).is_none());
    }

    #[test]
    fn orthogonal_init_has_orthonormal_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = orthogonal_init(4, 8, 1.0, &mut rng);
        let g = w.dot(&w.t());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[[i, j]], expect, epsilon = 1e-10);
            }
        }
    }

    use rand::SeedableRng;

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![5.0f64];
        let mut opt = Adam::new(1, 0.1);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3);
    }
}
