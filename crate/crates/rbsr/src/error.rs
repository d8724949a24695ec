//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RbsrError>;

#[derive(Debug, Error)]
pub enum RbsrError {
    /// Malformed or unsupported image data.
    #[error("image: {0}")]
    Image(String),

    /// Tensor or image dimensions incompatible with the requested operation.
    #[error("shape: {0}")]
    Shape(String),

    /// Invalid argument outside of shape problems (bad sigma, even kernel size, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Run-configuration parse failure, with the 1-based line it occurred on.
    #[error("config (line {line}): {msg}")]
    Config { line: usize, msg: String },

    /// Linear solver failed to reach the requested tolerance.
    #[error("solver: {0}")]
    Solver(String),

    /// Training-loop contract violation (bad manifest, missing checkpoint, ...).
    #[error("train: {0}")]
    Train(String),

    /// Checkpoint file rejected (bad magic, truncation, duplicate names).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RbsrError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        RbsrError::Io {
            path: path.into(),
            source,
        }
    }
}
