//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RestoreError {
    /// A distortion or training parameter is outside its allowed range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A function was handed input it cannot work with (empty list, bad manifest, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Checkpoint role or config does not match what the operation expects.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    /// A parameter name could not be assigned to a partition set.
    #[error("partition error: {0}")]
    Partition(String),

    /// A replay-only training run was handed real old-task data.
    #[error("access violation: {0}")]
    AccessViolation(String),

    /// An internal invariant was violated (column sums, loss decomposition, ...).
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl RestoreError {
    /// Process exit code for the CLI: 2 for bad input, 3 for invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            RestoreError::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, RestoreError>;
