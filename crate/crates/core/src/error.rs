//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// An API contract was violated (wrong call order, missing state, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index or label is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A numeric operation failed (NaN input, singular system, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The incremental-learning protocol was violated (session order,
    /// overlapping class sets, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A file could not be parsed into the expected format.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
