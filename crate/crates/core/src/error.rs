use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FrtmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FrtmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {context} at iteration {iteration}")]
    Numerical { context: &'static str, iteration: usize },

    #[error("feature file: bad magic {found:?}, expected \"FRTM\"")]
    BadMagic { found: [u8; 4] },

    #[error("feature file: version mismatch, found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("feature file: truncated header (field `{field}`)")]
    TruncatedHeader { field: &'static str },

    #[error("feature file: truncated payload, expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("feature file: invalid header field `{field}`: {reason}")]
    InvalidHeader { field: &'static str, reason: String },

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("image codec error for {}: {message}", path.display())]
    Codec { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> FrtmError {
    FrtmError::Dimension(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> FrtmError {
    FrtmError::Argument(msg.into())
}
