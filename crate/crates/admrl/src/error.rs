use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdmrlError {
    /// Caller handed in something that violates an operation precondition.
    #[error("input error: {0}")]
    Input(String),
    /// Operation invoked in a state where it cannot run (e.g. empty dataset).
    #[error("state error: {0}")]
    State(String),
    /// Numerical failure that must be surfaced rather than masked.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AdmrlError>;
