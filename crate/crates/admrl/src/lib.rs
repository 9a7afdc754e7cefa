//! Desk-scale laboratory for adversarial model-based meta-RL: a shared
//! dynamics model trained against the worst-case task in a parameterized
//! reward family, with every gradient estimator validated against exact
//! tabular and finite-difference oracles.

pub mod error;
pub mod math;
pub mod mlp;

pub mod admrl_loop;
pub mod cli;
pub mod dyn_model;
pub mod envs;
pub mod gradcheck;
pub mod metrics_io;
pub mod policy;
pub mod policy_opt;
pub mod oracle;
pub mod rollout;
pub mod task_grad;

pub use error::{AdmrlError, Result};
