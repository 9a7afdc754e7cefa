//! Outer training loop: per-task iterations alternating zero-shot
//! adaptation, real-sample SLBO training, and a task update that is either
//! adversarial ascent or baseline sampling. Checkpointed and resumable.

use crate::dyn_model::{DynModel, TransitionDataset, VirtualDynamics};
use crate::envs::{project_task, PointMass2D, RewardFamily, TaskBox, TaskParams};
use crate::error::{AdmrlError, Result};
use crate::policy::GaussianMlpPolicy;
use crate::policy_opt::{
    virtual_training, zero_shot_adapt, TrpoConfig, VirtualTrainingBudget, ZeroShotOutcome,
};
use crate::rollout::{collect, return_of, SampleCounter, Trajectory};
use crate::task_grad::{task_ascent_step, task_gradient, CgConfig, GradEstimate};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Adversarial,
    Uniform,
    Gaussian,
}

/// Fully resolved run configuration. Unknown keys are rejected at parse
/// time; heavy sample counts are divided by `desk_scale` via `effective`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    pub sampler: Sampler,
    pub task_dim: usize,
    pub task_half_width: f64,
    pub n_tasks: usize,
    pub n_slbo: usize,
    /// The first task trains longer; its SLBO iteration count.
    pub first_task_slbo: usize,
    pub n_collect: usize,
    pub n_inner: usize,
    pub n_zeroshot: usize,
    pub n_model: usize,
    pub n_policy: usize,
    pub alpha: f64,
    pub alpha_sweep: Vec<f64>,
    pub gamma: f64,
    pub horizon: usize,
    pub seed: u64,
    /// Divides n_collect, n_zeroshot, n_inner and n_policy (floor, min 1).
    pub desk_scale: usize,
    /// Collect dedicated real batches for the task gradient instead of
    /// reusing SLBO batches.
    pub fresh_rollout: bool,
    pub reward_coeffs: [f64; 3],
    pub model_hidden: usize,
    pub policy_hidden: Vec<usize>,
    pub exploration_noise: f64,
    pub trpo: TrpoConfig,
    pub cg: CgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "pointmass2d".into(),
            sampler: Sampler::Adversarial,
            task_dim: 2,
            task_half_width: 3.0,
            n_tasks: 10,
            n_slbo: 3,
            first_task_slbo: 9,
            n_collect: 2000,
            n_inner: 20,
            n_zeroshot: 40,
            n_model: 100,
            n_policy: 20,
            alpha: 4.0,
            alpha_sweep: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            gamma: 0.99,
            horizon: 100,
            seed: 0,
            desk_scale: 1,
            fresh_rollout: false,
            reward_coeffs: [1.0, 1.0, 0.0],
            model_hidden: 64,
            policy_hidden: vec![32],
            exploration_noise: 0.1,
            trpo: TrpoConfig::default(),
            cg: CgConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.env != "pointmass2d" {
            return Err(AdmrlError::Input(format!("unknown env '{}'", self.env)));
        }
        if self.n_tasks < 1 {
            return Err(AdmrlError::Input("n_tasks must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(AdmrlError::Input("alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AdmrlError::Input("gamma must be in [0, 1)".into()));
        }
        if self.horizon < 1 || self.n_collect < self.horizon {
            return Err(AdmrlError::Input("need horizon >= 1 and n_collect >= horizon".into()));
        }
        if self.desk_scale < 1 {
            return Err(AdmrlError::Input("desk_scale must be >= 1".into()));
        }
        if self.n_slbo < 1 || self.first_task_slbo < 1 {
            return Err(AdmrlError::Input("SLBO iteration counts must be >= 1".into()));
        }
        self.trpo.validate()?;
        self.cg.validate()?;
        Ok(())
    }

    /// Applies the desk_scale knob to the heavy sample counts.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        let d = self.desk_scale;
        c.n_collect = (self.n_collect / d).max(self.horizon);
        c.n_zeroshot = (self.n_zeroshot / d).max(1);
        c.n_inner = (self.n_inner / d).max(1);
        // the number of policy updates shrinks, not the per-update batch:
        // TRPO steps on a handful of trajectories are too noisy to trust,
        // while fewer well-conditioned steps degrade gracefully
        c.n_policy = (self.n_policy / d).max(1);
        c.desk_scale = 1;
        c
    }

    pub fn task_box(&self) -> TaskBox {
        TaskBox::symmetric(self.task_dim, self.task_half_width)
    }

    pub fn build_policy(&self) -> GaussianMlpPolicy {
        GaussianMlpPolicy::new(4, 2, &self.policy_hidden)
    }

    pub fn build_env(&self) -> PointMass2D {
        PointMass2D::default()
    }

    pub fn build_reward(&self) -> RewardFamily {
        RewardFamily::VelocityMatch { coeffs: self.reward_coeffs }
    }

    /// Real samples a full run consumes (SLBO collections; fresh_rollout
    /// batches for the task gradient add trpo.n_trpo-sized batches on top).
    pub fn expected_real_samples(&self) -> u64 {
        let c = self.effective();
        let slbo_total = c.first_task_slbo + (c.n_tasks - 1) * c.n_slbo;
        let per_collect = (c.n_collect / c.horizon) as u64 * c.horizon as u64;
        slbo_total as u64 * per_collect
    }
}

/// Draws the next task for the baseline samplers.
pub fn sample_task(sampler: Sampler, bounds: &TaskBox, rng: &mut ChaCha8Rng) -> Result<TaskParams> {
    match sampler {
        Sampler::Adversarial => Err(AdmrlError::Input(
            "adversarial tasks come from task_ascent_step, not sampling".into(),
        )),
        Sampler::Uniform => {
            let psi = Array1::from_iter(
                (0..bounds.dim()).map(|i| rng.gen_range(bounds.lo[i]..bounds.hi[i])),
            );
            project_task(bounds, &psi)
        }
        Sampler::Gaussian => {
            let center = bounds.center();
            let psi = Array1::from_iter((0..bounds.dim()).map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                center[i] + z
            }));
            project_task(bounds, &psi)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_index: usize,
    /// Task trained during this iteration.
    pub psi: Array1<f64>,
    /// Task selected for the next iteration.
    pub next_psi: Array1<f64>,
    pub theta_hat: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub zero_shot_grad_norm: Option<f64>,
    pub zero_shot_converged: Option<bool>,
    /// Present on adversarial non-first iterations.
    pub grad: Option<GradEstimate>,
    /// Next task came from the baseline sampler or first-task re-init.
    pub sampled_next: bool,
    pub mean_return_star: f64,
    pub real_steps_after: u64,
}

#[derive(Clone, Debug)]
pub struct RunState {
    pub config: RunConfig,
    pub model: DynModel,
    /// Task for the next (not yet run) iteration.
    pub psi: Array1<f64>,
    pub records: Vec<TaskRecord>,
    pub counter: SampleCounter,
    pub dataset: TransitionDataset,
}

/// On-disk checkpoint; the dataset lives in data.csv next to it.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: RunConfig,
    model: DynModel,
    psi: Array1<f64>,
    records: Vec<TaskRecord>,
    counter: SampleCounter,
    n_transitions: usize,
}

fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((task as u64).wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15)))
}

fn ckpt_path(dir: &Path, task: usize) -> std::path::PathBuf {
    dir.join("state").join(format!("task_{task:03}.ckpt"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let text = serde_json::to_string_pretty(value)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn save_state(state: &RunState, dir: &Path, task: usize) -> Result<()> {
    std::fs::create_dir_all(dir.join("state"))?;
    state.dataset.save_csv(&dir.join("data.csv"))?;
    let ckpt = Checkpoint {
        config: state.config.clone(),
        model: state.model.clone(),
        psi: state.psi.clone(),
        records: state.records.clone(),
        counter: state.counter,
        n_transitions: state.dataset.len(),
    };
    write_json(&ckpt_path(dir, task), &ckpt)?;
    // log.jsonl rewritten from records so resumed runs stay consistent.
    let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("log.jsonl"))?);
    for r in &state.records {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Loads the newest checkpoint in `dir`, if any, restoring the dataset from
/// data.csv truncated to the checkpointed length.
pub fn load_latest(dir: &Path) -> Result<Option<RunState>> {
    let state_dir = dir.join("state");
    if !state_dir.is_dir() {
        return Ok(None);
    }
    let mut latest: Option<(usize, std::path::PathBuf)> = None;
    for entry in std::fs::read_dir(&state_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(num) = name.strip_prefix("task_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(idx) = num.parse::<usize>() {
                if latest.as_ref().map_or(true, |(best, _)| idx > *best) {
                    latest = Some((idx, path));
                }
            }
        }
    }
    let Some((_, path)) = latest else { return Ok(None) };
    let text = std::fs::read_to_string(&path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let mut dataset = TransitionDataset::load_csv(&dir.join("data.csv"))?;
    if dataset.len() < ckpt.n_transitions {
        return Err(AdmrlError::State(format!(
            "data.csv has {} transitions, checkpoint expects {}",
            dataset.len(),
            ckpt.n_transitions
        )));
    }
    dataset.transitions.truncate(ckpt.n_transitions);
    Ok(Some(RunState {
        config: ckpt.config,
        model: ckpt.model,
        psi: ckpt.psi,
        records: ckpt.records,
        counter: ckpt.counter,
        dataset,
    }))
}

/// Executes (or resumes) a full training run in `dir`. Fresh runs write the
/// resolved config; resumed runs require the same config.
pub fn run(config: &RunConfig, dir: &Path) -> Result<RunState> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let cfg = config.effective();
    let mut state = match load_latest(dir)? {
        Some(existing) => {
            if existing.config != *config {
                return Err(AdmrlError::Input(
                    "run directory holds checkpoints from a different config".into(),
                ));
            }
            existing
        }
        None => {
            write_json(&dir.join("config.json"), config)?;
            let mut rng0 = task_rng(cfg.seed, 0);
            let psi0 = sample_task(Sampler::Uniform, &cfg.task_box(), &mut rng0)?.psi;
            RunState {
                config: config.clone(),
                model: DynModel::new(4, 2, cfg.model_hidden, &mut task_rng(cfg.seed, usize::MAX)),
                psi: psi0,
                records: Vec::new(),
                counter: SampleCounter::default(),
                dataset: TransitionDataset::new(),
            }
        }
    };
    let bounds = cfg.task_box();
    let env = cfg.build_env();
    let rew = cfg.build_reward();
    let policy = cfg.build_policy();
    let reset_state = Array1::zeros(4);
    let n_traj_collect = cfg.n_collect / cfg.horizon;
    let n_traj_grad = (cfg.trpo.n_trpo / cfg.horizon).max(1);
    while state.records.len() < cfg.n_tasks {
        let i = state.records.len();
        let mut rng = task_rng(cfg.seed, i);
        let psi = state.psi.clone();
        // (a) Zero-shot adaptation (skipped while the dataset is empty).
        let (theta_hat, zs_norm, zs_conv) = match zero_shot_adapt(
            &policy,
            &mut state.model,
            &state.dataset,
            &rew,
            &psi,
            cfg.gamma,
            cfg.horizon,
            &reset_state,
            cfg.n_zeroshot,
            cfg.n_model,
            cfg.n_policy,
            &cfg.trpo,
            &mut rng,
            &mut state.counter,
        )? {
            ZeroShotOutcome::Adapted { theta, grad_norm, converged } => {
                (theta, Some(grad_norm), Some(converged))
            }
            ZeroShotOutcome::SkippedEmptyDataset => (policy.init_params(&mut rng), None, None),
        };
        // (b) SLBO: alternate real collection and virtual training.
        let n_slbo = if i == 0 { cfg.first_task_slbo } else { cfg.n_slbo };
        let mut theta = theta_hat.clone();
        let mut first_batch: Option<Vec<Trajectory>> = None;
        let mut last_batch: Vec<Trajectory> = Vec::new();
        for s in 0..n_slbo {
            let batch = collect(
                &env,
                &policy,
                &theta,
                n_traj_collect,
                cfg.horizon,
                &mut rng,
                cfg.exploration_noise,
                &mut state.counter,
            )?;
            state.dataset.append_batch(&batch, i)?;
            if s == 0 {
                first_batch = Some(batch.clone());
            }
            last_batch = batch;
            let budget = VirtualTrainingBudget {
                n: cfg.n_inner,
                n_model: cfg.n_model,
                n_policy: cfg.n_policy,
            };
            theta = virtual_training(
                &policy,
                &theta,
                &mut state.model,
                &state.dataset,
                &rew,
                &psi,
                cfg.gamma,
                cfg.horizon,
                &reset_state,
                &budget,
                &cfg.trpo,
                &mut rng,
                &mut state.counter,
            )?;
        }
        let theta_star = theta;
        let mean_return_star = {
            let mut total = 0.0;
            for t in &last_batch {
                total += return_of(t, &rew, &psi, cfg.gamma)?;
            }
            total / last_batch.len() as f64
        };
        // (c) Task update.
        let (next_psi, grad, sampled_next) = match cfg.sampler {
            Sampler::Uniform | Sampler::Gaussian => {
                (sample_task(cfg.sampler, &bounds, &mut rng)?.psi, None, true)
            }
            Sampler::Adversarial if i == 0 => {
                // First task: random re-initialization, no gradient yet.
                (sample_task(Sampler::Uniform, &bounds, &mut rng)?.psi, None, true)
            }
            Sampler::Adversarial => {
                let (batch_star, batch_hat) = if cfg.fresh_rollout {
                    let star = collect(
                        &env,
                        &policy,
                        &theta_star,
                        n_traj_grad,
                        cfg.horizon,
                        &mut rng,
                        0.0,
                        &mut state.counter,
                    )?;
                    let hat = collect(
                        &env,
                        &policy,
                        &theta_hat,
                        n_traj_grad,
                        cfg.horizon,
                        &mut rng,
                        0.0,
                        &mut state.counter,
                    )?;
                    (star, hat)
                } else {
                    (last_batch.clone(), first_batch.clone().expect("n_slbo >= 1"))
                };
                let venv = VirtualDynamics { model: &state.model, reset_state: reset_state.clone() };
                let virtual_batch = collect(
                    &venv,
                    &policy,
                    &theta_hat,
                    n_traj_grad,
                    cfg.horizon,
                    &mut rng,
                    0.0,
                    &mut state.counter,
                )?;
                let est = task_gradient(
                    &policy,
                    &theta_star,
                    &theta_hat,
                    &batch_star,
                    &batch_hat,
                    &virtual_batch,
                    &rew,
                    &psi,
                    cfg.gamma,
                    &cfg.cg,
                )?;
                let next = task_ascent_step(&bounds, &psi, &est.total, cfg.alpha)?.psi;
                (next, Some(est), false)
            }
        };
        state.records.push(TaskRecord {
            task_index: i,
            psi: psi.clone(),
            next_psi: next_psi.clone(),
            theta_hat,
            theta_star,
            zero_shot_grad_norm: zs_norm,
            zero_shot_converged: zs_conv,
            grad,
            sampled_next,
            mean_return_star,
            real_steps_after: state.counter.real_steps,
        });
        state.psi = next_psi;
        save_state(&state, dir, i)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config(sampler: Sampler, seed: u64) -> RunConfig {
        RunConfig {
            sampler,
            n_tasks: 3,
            n_slbo: 1,
            first_task_slbo: 1,
            n_collect: 60,
            n_inner: 1,
            n_zeroshot: 1,
            n_model: 40,
            n_policy: 1,
            horizon: 15,
            gamma: 0.95,
            seed,
            model_hidden: 16,
            trpo: TrpoConfig { n_trpo: 60, ..TrpoConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_encode_paper_constants() {
        let c = RunConfig::default();
        assert_eq!(c.n_zeroshot, 40);
        assert_eq!(c.n_slbo, 3);
        assert_eq!(c.n_inner, 20);
        assert_eq!(c.n_model, 100);
        assert_eq!(c.n_policy, 20);
        assert_eq!(c.cg.max_iters, 200);
        assert_eq!(c.alpha_sweep, vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
        assert_abs_diff_eq!(c.alpha, 4.0);
        assert_eq!(c.desk_scale, 1);
    }

    #[test]
    fn unknown_config_key_rejected_by_name() {
        let err = serde_json::from_str::<RunConfig>(r#"{"bogus_key": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut c = RunConfig::default();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.n_tasks = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.env = "cartpole".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_scale_divides_heavy_counts() {
        let mut c = RunConfig::default();
        c.desk_scale = 10;
        let e = c.effective();
        assert_eq!(e.n_collect, 200);
        assert_eq!(e.n_zeroshot, 4);
        assert_eq!(e.n_inner, 2);
        assert_eq!(e.n_policy, 2);
        // Untouched budgets.
        assert_eq!(e.n_slbo, c.n_slbo);
        assert_eq!(e.n_model, c.n_model);
        assert_eq!(e.trpo.n_trpo, c.trpo.n_trpo);
    }

    #[test]
    fn sample_task_uniform_statistics() {
        let b = TaskBox::symmetric(2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mean = Array1::<f64>::zeros(2);
        for _ in 0..10_000 {
            let t = sample_task(Sampler::Uniform, &b, &mut rng).unwrap();
            assert!(b.contains(&t.psi));
            mean += &t.psi;
        }
        mean /= 10_000.0;
        for v in mean.iter() {
            assert!(v.abs() < 0.1 * 6.0, "mean off-center: {v}");
        }
    }

    #[test]
    fn sample_task_gaussian_projects_to_boundary() {
        // A tight box forces most unit-variance draws onto the boundary.
        let b = TaskBox::symmetric(2, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hit_boundary = 0;
        for _ in 0..100 {
            let t = sample_task(Sampler::Gaussian, &b, &mut rng).unwrap();
            assert!(b.contains(&t.psi));
            if t.psi.iter().any(|v| v.abs() == 0.1) {
                hit_boundary += 1;
            }
        }
        assert!(hit_boundary > 50);
    }

    #[test]
    fn sample_task_adversarial_is_error() {
        let b = TaskBox::symmetric(2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_task(Sampler::Adversarial, &b, &mut rng).is_err());
    }

    #[test]
    fn sample_task_deterministic() {
        let b = TaskBox::symmetric(2, 3.0);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..5)
                .map(|_| sample_task(Sampler::Uniform, &b, &mut rng).unwrap().psi)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn tiny_run_accounting_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Sampler::Uniform, 3);
        let state = run(&cfg, dir.path()).unwrap();
        assert_eq!(state.records.len(), 3);
        assert_eq!(state.counter.real_steps, cfg.expected_real_samples());
        assert_eq!(state.dataset.len() as u64, state.counter.real_steps);
        let b = cfg.task_box();
        for r in &state.records {
            assert!(b.contains(&r.psi));
            assert!(b.contains(&r.next_psi));
            assert!(r.sampled_next);
            assert!(r.grad.is_none());
        }
        assert!(dir.path().join("config.json").is_file());
        assert!(dir.path().join("log.jsonl").is_file());
        assert!(dir.path().join("data.csv").is_file());
        assert!(ckpt_path(dir.path(), 2).is_file());
    }

    #[test]
    fn adversarial_run_records_gradients_after_first_task() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Sampler::Adversarial, 4);
        let state = run(&cfg, dir.path()).unwrap();
        assert!(state.records[0].grad.is_none());
        assert!(state.records[0].sampled_next);
        for r in &state.records[1..] {
            assert!(r.grad.is_some(), "task {} missing gradient", r.task_index);
            assert!(!r.sampled_next);
        }
        // Virtual batches and recomputations added nothing to the counter.
        assert_eq!(state.counter.real_steps, cfg.expected_real_samples());
    }

    #[test]
    fn run_is_bitwise_reproducible() {
        let cfg = tiny_config(Sampler::Adversarial, 5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run(&cfg, d1.path()).unwrap();
        run(&cfg, d2.path()).unwrap();
        for i in 0..3 {
            let a = std::fs::read(ckpt_path(d1.path(), i)).unwrap();
            let b = std::fs::read(ckpt_path(d2.path(), i)).unwrap();
            assert_eq!(a, b, "checkpoint {i} differs");
        }
        let a = std::fs::read(d1.path().join("log.jsonl")).unwrap();
        let b = std::fs::read(d2.path().join("log.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_state() {
        let cfg = tiny_config(Sampler::Adversarial, 6);
        let full = tempfile::tempdir().unwrap();
        run(&cfg, full.path()).unwrap();
        // Simulate an interruption after task 0 by dropping later artifacts.
        let part = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(part.path().join("state")).unwrap();
        std::fs::copy(full.path().join("config.json"), part.path().join("config.json")).unwrap();
        std::fs::copy(ckpt_path(full.path(), 0), ckpt_path(part.path(), 0)).unwrap();
        // data.csv from the end of the run; the loader truncates it back.
        std::fs::copy(full.path().join("data.csv"), part.path().join("data.csv")).unwrap();
        run(&cfg, part.path()).unwrap();
        for i in 1..3 {
            let a = std::fs::read(ckpt_path(full.path(), i)).unwrap();
            let b = std::fs::read(ckpt_path(part.path(), i)).unwrap();
            assert_eq!(a, b, "resumed checkpoint {i} differs");
        }
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Sampler::Uniform, 7);
        run(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.seed = 8;
        assert!(run(&other, dir.path()).is_err());
    }

    #[test]
    fn dataset_is_append_only_across_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Sampler::Uniform, 9);
        let state = run(&cfg, dir.path()).unwrap();
        // Tags must be non-decreasing task indices.
        let mut prev = 0;
        for t in &state.dataset.transitions {
            assert!(t.task >= prev);
            prev = t.task;
        }
        assert_eq!(prev, 2);
    }
}
