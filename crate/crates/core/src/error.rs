use std::io;

use thiserror::Error;

/// Errors produced anywhere in the codec pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("coordinate {value} does not fit in a depth-{depth} cube")]
    DepthTooSmall { value: f64, depth: u8 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f32 },
    #[error("invalid probability table: {0}")]
    InvalidPmf(String),
    #[error("decode error at {location}: {reason}")]
    DecodeError { location: String, reason: String },
    #[error("feature cache needs {needed} bytes, cap is {cap}")]
    CacheTooLarge { needed: usize, cap: usize },
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("k = {k} out of range 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("anchor bpp must be positive, got {0}")]
    InvalidAnchor(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn decode(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::DecodeError {
            location: location.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
