//! Python bindings: configuration, training runs, grid evaluation, the
//! estimator validation suite, and the exact tabular oracle.

use admrl::admrl_loop::{load_latest, run, RunConfig, RunState};
use admrl::cli::{apply_override, evaluate_run};
use admrl::envs::{Dynamics, PointMass2D, RewardFamily};
use admrl::gradcheck::{run_all, CheckBudget};
use admrl::oracle::{
    exact_grad, exact_return, occupancy, resolve_inner, GradWrt, SoftmaxPolicy, TabularMdp,
};
use admrl::task_grad::{cg_solve, CgConfig};
use admrl::AdmrlError;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn err(e: AdmrlError) -> PyErr {
    match e {
        AdmrlError::Input(_) | AdmrlError::State(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration with the same JSON schema and dotted-key overrides as
/// the command line.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => serde_json::from_str(text)
                .map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    /// Sets one key, e.g. cfg.set("trpo.kl_limit", "0.02"); unknown keys
    /// raise ValueError with the key named.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut tree = serde_json::to_value(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        apply_override(&mut tree, &format!("{key}={value}")).map_err(err)?;
        self.inner = serde_json::from_value(tree)
            .map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
        self.inner.validate().map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.inner.n_tasks
    }

    #[getter]
    fn desk_scale(&self) -> usize {
        self.inner.desk_scale
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(env={}, sampler={:?}, n_tasks={}, seed={})",
            self.inner.env, self.inner.sampler, self.inner.n_tasks, self.inner.seed
        )
    }
}

/// Handle on a finished (or resumed) training run.
#[pyclass(name = "Run")]
struct PyRun {
    state: RunState,
    dir: String,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn real_steps(&self) -> u64 {
        self.state.counter.real_steps
    }

    #[getter]
    fn n_tasks_done(&self) -> usize {
        self.state.records.len()
    }

    #[getter]
    fn dir(&self) -> &str {
        &self.dir
    }

    /// Training tasks in visit order, one [psi_0, psi_1] per iteration.
    fn psi_trace(&self) -> Vec<Vec<f64>> {
        self.state.records.iter().map(|r| r.psi.to_vec()).collect()
    }

    /// Full per-task records as a JSON string.
    fn records_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.state.records)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Grid evaluation; writes report.json / grid.csv / worst_case.csv into
    /// `out` and returns the report path.
    #[pyo3(signature = (out, grid=6, ood=false, ood_half_width=5.0,
                        adapt=vec![2000, 4000, 6000], n_eval=20,
                        oracle_budget=300, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        out: &str,
        grid: usize,
        ood: bool,
        ood_half_width: f64,
        adapt: Vec<u64>,
        n_eval: usize,
        oracle_budget: usize,
        seed: u64,
    ) -> PyResult<String> {
        evaluate_run(
            Path::new(&self.dir),
            grid,
            ood,
            ood_half_width,
            &adapt,
            n_eval,
            oracle_budget,
            seed,
            Path::new(out),
        )
        .map_err(err)?;
        Ok(format!("{out}/report.json"))
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(dir={}, tasks={}, real_steps={})",
            self.dir,
            self.state.records.len(),
            self.state.counter.real_steps
        )
    }
}

/// Executes (or resumes) a training run in `out_dir`.
#[pyfunction]
fn run_training(config: &PyConfig, out_dir: &str) -> PyResult<PyRun> {
    let state = run(&config.inner, Path::new(out_dir)).map_err(err)?;
    Ok(PyRun { state, dir: out_dir.to_string() })
}

/// Loads the newest checkpoint from a run directory.
#[pyfunction]
fn load_run(dir: &str) -> PyResult<PyRun> {
    match load_latest(Path::new(dir)).map_err(err)? {
        Some(state) => Ok(PyRun { state, dir: dir.to_string() }),
        None => Err(PyValueError::new_err(format!("no checkpoints under {dir}"))),
    }
}

/// Estimator validation suite; returns one dict per check.
#[pyfunction]
#[pyo3(signature = (seed=0, quick=false))]
fn gradcheck(py: Python<'_>, seed: u64, quick: bool) -> PyResult<Vec<Py<PyDict>>> {
    let budget = if quick { CheckBudget::quick() } else { CheckBudget::full() };
    let results = run_all(seed, &budget).map_err(err)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("name", &r.name)?;
            d.set_item("value", r.value)?;
            d.set_item("threshold", r.threshold)?;
            d.set_item("passed", r.passed)?;
            d.set_item("detail", &r.detail)?;
            d.set_item("seconds", r.seconds)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Exact tabular oracle: a seeded finite MDP with linear reward features
/// and closed-form returns, gradients, and occupancies.
#[pyclass(name = "Oracle")]
struct PyOracle {
    mdp: TabularMdp,
    policy: SoftmaxPolicy,
}

#[pymethods]
impl PyOracle {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> Self {
        let mdp = TabularMdp::default_oracle(seed);
        let policy = SoftmaxPolicy::for_mdp(&mdp);
        PyOracle { mdp, policy }
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.mdp.n_states * self.mdp.n_actions
    }

    #[getter]
    fn psi_dim(&self) -> usize {
        self.mdp.psi_dim()
    }

    fn exact_return(&self, theta: Vec<f64>, psi: Vec<f64>) -> PyResult<f64> {
        exact_return(&self.mdp, &self.policy, &theta, &Array1::from_vec(psi), 0.0).map_err(err)
    }

    fn exact_grad_theta(&self, theta: Vec<f64>, psi: Vec<f64>) -> PyResult<Vec<f64>> {
        exact_grad(&self.mdp, &self.policy, &theta, &Array1::from_vec(psi), 0.0, GradWrt::Theta)
            .map(|g| g.to_vec())
            .map_err(err)
    }

    fn exact_grad_psi(&self, theta: Vec<f64>, psi: Vec<f64>) -> PyResult<Vec<f64>> {
        exact_grad(&self.mdp, &self.policy, &theta, &Array1::from_vec(psi), 0.0, GradWrt::Psi)
            .map(|g| g.to_vec())
            .map_err(err)
    }

    fn occupancy(&self, theta: Vec<f64>, psi: Vec<f64>) -> PyResult<Vec<f64>> {
        occupancy(&self.mdp, &self.policy, &theta, &Array1::from_vec(psi))
            .map(|d| d.to_vec())
            .map_err(err)
    }

    /// Entropy-regularized inner optimum, the re-solve oracle behind the
    /// implicit-Jacobian checks.
    #[pyo3(signature = (psi, beta=0.1, budget=200000))]
    fn resolve_inner(&self, psi: Vec<f64>, beta: f64, budget: usize) -> PyResult<Vec<f64>> {
        let theta0 = vec![0.0; self.mdp.n_states * self.mdp.n_actions];
        resolve_inner(&self.mdp, &Array1::from_vec(psi), beta, budget, &theta0).map_err(err)
    }
}

/// The clipped double-integrator environment.
#[pyclass(name = "PointMass")]
struct PyPointMass {
    env: PointMass2D,
    rewards: RewardFamily,
}

#[pymethods]
impl PyPointMass {
    #[new]
    fn new() -> Self {
        PyPointMass {
            env: PointMass2D::default(),
            rewards: RewardFamily::VelocityMatch { coeffs: [1.0, 1.0, 0.0] },
        }
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.env.reset(&mut rng).to_vec()
    }

    fn step(&self, state: Vec<f64>, action: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.env
            .step(&Array1::from_vec(state), &Array1::from_vec(action), &mut rng)
            .map(|s| s.to_vec())
            .map_err(err)
    }

    fn reward(&self, psi: Vec<f64>, state: Vec<f64>, action: Vec<f64>, next: Vec<f64>) -> PyResult<f64> {
        self.rewards
            .reward(
                &Array1::from_vec(psi),
                &Array1::from_vec(state),
                &Array1::from_vec(action),
                &Array1::from_vec(next),
            )
            .map_err(err)
    }
}

/// Damped normal-equation conjugate gradient on a dense symmetric matrix.
#[pyfunction]
#[pyo3(signature = (matrix, b, max_iters=200, residual_tol=1e-8, damping=1e-3))]
fn cg_solve_dense(
    matrix: Vec<Vec<f64>>,
    b: Vec<f64>,
    max_iters: usize,
    residual_tol: f64,
    damping: f64,
) -> PyResult<(Vec<f64>, f64, bool)> {
    let n = b.len();
    if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be n x n matching b"));
    }
    let m = Array2::from_shape_fn((n, n), |(i, j)| matrix[i][j]);
    let cfg = CgConfig { max_iters, residual_tol, damping };
    let out = cg_solve(&|x: &Array1<f64>| m.dot(x), &Array1::from_vec(b), &cfg).map_err(err)?;
    Ok((out.x.to_vec(), out.rel_residual, out.converged))
}

#[pymodule]
fn admrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PyPointMass>()?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    m.add_function(wrap_pyfunction!(load_run, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(cg_solve_dense, m)?)?;
    Ok(())
}
