//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel matrix is singular even after jitter escalation (last jitter {jitter:.3e})")]
    SingularKernel { jitter: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("rollout aborted at step {step}: {reason}")]
    RolloutAborted { step: usize, reason: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
