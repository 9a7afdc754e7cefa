//! Learned transition model: an MLP regressing the normalized state delta
//! s' - s from (normalized state, action), plus the append-only transition
//! store it is fit on.

use crate::envs::{Action, Dynamics, NormStats, State};
use crate::error::{AdmrlError, Result};
use crate::math::{orthogonal_init, Adam};
use crate::mlp::MlpArch;
use crate::rollout::{Source, Trajectory};
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transition {
    pub s: State,
    pub a: Action,
    pub s_next: State,
    /// Index of the task whose collection produced this triple.
    pub task: usize,
}

/// Append-only store of real transitions, persisted as CSV.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
}

impl TransitionDataset {
    pub fn new() -> Self {
        TransitionDataset::default()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let finite = t.s.iter().chain(t.a.iter()).chain(t.s_next.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(AdmrlError::Input("non-finite transition".into()));
        }
        self.transitions.push(t);
        Ok(())
    }

    /// Appends all (s_t, a_t, s_{t+1}) triples of real trajectories; rejects
    /// virtual ones so model data can never come from the model itself.
    pub fn append_batch(&mut self, batch: &[Trajectory], task: usize) -> Result<()> {
        for traj in batch {
            if traj.source != Source::Real {
                return Err(AdmrlError::Input(
                    "refusing to store virtual transitions in the model dataset".into(),
                ));
            }
            for t in 0..traj.horizon() {
                self.push(Transition {
                    s: traj.states[t].clone(),
                    a: traj.actions[t].clone(),
                    s_next: traj.states[t + 1].clone(),
                    task,
                })?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(first) = self.transitions.first() {
            writeln!(f, "# dims {} {}", first.s.len(), first.a.len())?;
        } else {
            writeln!(f, "# dims 0 0")?;
        }
        for t in &self.transitions {
            let cols: Vec<String> = std::iter::once(t.task.to_string())
                .chain(t.s.iter().map(|v| format!("{v:?}")))
                .chain(t.a.iter().map(|v| format!("{v:?}")))
                .chain(t.s_next.iter().map(|v| format!("{v:?}")))
                .collect();
            writeln!(f, "{}", cols.join(","))?;
        }
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| AdmrlError::Input("empty dataset file".into()))??;
        let dims: Vec<usize> = header
            .trim_start_matches("# dims")
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| AdmrlError::Input("bad dataset header".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(AdmrlError::Input("bad dataset header".into()));
        }
        let (sd, ad) = (dims[0], dims[1]);
        let mut out = TransitionDataset::new();
        for line in lines {
            let line = line?;
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != 1 + 2 * sd + ad {
                return Err(AdmrlError::Input("bad dataset row".into()));
            }
            let task: usize =
                vals[0].parse().map_err(|_| AdmrlError::Input("bad task tag".into()))?;
            let nums: Vec<f64> = vals[1..]
                .iter()
                .map(|v| v.parse().map_err(|_| AdmrlError::Input("bad dataset value".into())))
                .collect::<Result<_>>()?;
            out.push(Transition {
                s: Array1::from_vec(nums[..sd].to_vec()),
                a: Array1::from_vec(nums[sd..sd + ad].to_vec()),
                s_next: Array1::from_vec(nums[sd + ad..].to_vec()),
                task,
            })?;
        }
        Ok(out)
    }
}

/// MLP transition model predicting s' = s + delta, with state inputs and
/// delta targets normalized by dataset statistics recomputed at each fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynModel {
    pub arch: MlpArch,
    pub phi: Vec<f64>,
    pub state_stats: NormStats,
    pub delta_stats: NormStats,
}

pub const MODEL_LR: f64 = 1e-3;
pub const MODEL_BATCH: usize = 256;

impl DynModel {
    /// One tanh hidden layer of width `hidden` over (normalized s, a).
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let arch = MlpArch::new(vec![state_dim + action_dim, hidden, state_dim]);
        let mut phi = Vec::with_capacity(arch.num_params());
        for w in arch.sizes.windows(2) {
            let m = orthogonal_init(w[1], w[0], 0.1, rng);
            phi.extend(m.iter());
            phi.extend(std::iter::repeat(0.0).take(w[1]));
        }
        let unit = NormStats { mu: Array1::zeros(state_dim), sigma: Array1::ones(state_dim) };
        DynModel { arch, phi, state_stats: unit.clone(), delta_stats: unit }
    }

    pub fn state_dim(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.arch.input_dim() - self.arch.output_dim()
    }

    fn net_input(&self, s: &State, a: &Action) -> Vec<f64> {
        let sn = self.state_stats.normalize(s);
        sn.iter().chain(a.iter()).copied().collect()
    }

    /// Deterministic next-state prediction s + denormalized network output.
    pub fn predict(&self, s: &State, a: &Action) -> Result<State> {
        if !s.iter().chain(a.iter()).all(|v| v.is_finite()) {
            return Err(AdmrlError::Input("non-finite model input".into()));
        }
        let out = self.arch.forward(&self.phi, &self.net_input(s, a));
        let delta = Array1::from_vec(out) * &self.delta_stats.sigma + &self.delta_stats.mu;
        Ok(s + &delta)
    }

    /// Runs `n_model` minibatch Adam steps of MSE on normalized deltas,
    /// refreshing normalization statistics from the dataset first. Returns
    /// the per-step training loss.
    pub fn fit(
        &mut self,
        dataset: &TransitionDataset,
        n_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if dataset.is_empty() {
            return Err(AdmrlError::State("cannot fit model on empty dataset".into()));
        }
        if n_model == 0 {
            return Ok(Vec::new());
        }
        let n = dataset.len();
        if n >= 2 {
            let states: Vec<State> =
                dataset.transitions.iter().map(|t| t.s.clone()).collect();
            let deltas: Vec<State> =
                dataset.transitions.iter().map(|t| &t.s_next - &t.s).collect();
            self.state_stats = crate::envs::normalize_stats(&states)?;
            self.delta_stats = crate::envs::normalize_stats(&deltas)?;
        }
        // Precompute normalized inputs and targets once.
        let inputs: Vec<Vec<f64>> =
            dataset.transitions.iter().map(|t| self.net_input(&t.s, &t.a)).collect();
        let targets: Vec<Array1<f64>> = dataset
            .transitions
            .iter()
            .map(|t| (&t.s_next - &t.s - &self.delta_stats.mu) / &self.delta_stats.sigma)
            .collect();
        let mut opt = Adam::new(self.phi.len(), MODEL_LR);
        let mut losses = Vec::with_capacity(n_model);
        let batch = MODEL_BATCH.min(n);
        let mut grad = vec![0.0; self.phi.len()];
        for _ in 0..n_model {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for _ in 0..batch {
                let i = rng.gen_range(0..n);
                let cache = self.arch.forward_cache(&self.phi, &inputs[i]);
                let pred = cache.acts.last().unwrap();
                let cot: Vec<f64> = pred
                    .iter()
                    .zip(targets[i].iter())
                    .map(|(p, y)| 2.0 * (p - y) / batch as f64)
                    .collect();
                loss += pred
                    .iter()
                    .zip(targets[i].iter())
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum::<f64>()
                    / batch as f64;
                self.arch.vjp(&self.phi, &cache, &cot, 1.0, &mut grad);
            }
            opt.step(&mut self.phi, &grad);
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Mean squared next-state prediction error over a dataset.
    pub fn model_error(&self, dataset: &TransitionDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(AdmrlError::Input("model_error needs a non-empty dataset".into()));
        }
        let mut total = 0.0;
        for t in &dataset.transitions {
            let pred = self.predict(&t.s, &t.a)?;
            let diff = &pred - &t.s_next;
            total += diff.dot(&diff);
        }
        Ok(total / dataset.len() as f64)
    }
}

/// Read-only virtual environment view of a model, resetting to a fixed
/// initial state. Never counts as real data.
pub struct VirtualDynamics<'a> {
    pub model: &'a DynModel,
    pub reset_state: State,
}

impl Dynamics for VirtualDynamics<'_> {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    fn reset(&self, _rng: &mut ChaCha8Rng) -> State {
        self.reset_state.clone()
    }

    fn step(&self, s: &State, a: &Action, _rng: &mut ChaCha8Rng) -> Result<State> {
        self.model.predict(s, a)
    }

    fn is_real(&self) -> bool {
        false
    }
}
