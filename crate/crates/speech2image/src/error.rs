//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A layer or module was configured with impossible hyperparameters
    /// (non-integral conv output size, channel count not divisible by a
    /// reduction ratio, unknown mode string, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A batch was too small or otherwise degenerate for the operation
    /// (batchnorm statistics, contrastive losses, covariance estimates).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A numeric routine failed (non-finite loss, eigendecomposition failure).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Input data violated a documented contract (sequence too short,
    /// probability rows not normalized, malformed records).
    #[error("input contract violated: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
