use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation precondition was violated (contract error).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input left the documented numeric domain (NaN/Inf or out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed or inconsistent data (datasets, predictions, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Synthetic generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A numeric computation diverged (non-finite loss, failed gradient check).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
