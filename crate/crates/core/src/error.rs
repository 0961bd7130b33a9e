//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed corpus or split file; carries the offending location.
    #[error("{path}:{line}: {msg}")]
    CorpusFormat {
        path: String,
        line: usize,
        msg: String,
    },

    /// A task violates one of its invariants.
    #[error("task '{task}': {msg}")]
    InvalidTask { task: String, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence build failed: {0}")]
    SequenceBuild(String),

    #[error("model error: {0}")]
    Model(String),

    /// NaN or Inf in activations, loss or scores.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
