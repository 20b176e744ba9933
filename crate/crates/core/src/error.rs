//! Error type shared by all operators and I/O routines.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch or invalid shape.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid argument value (out-of-range label, even kernel size, ...).
    #[error("argument error: {0}")]
    Argument(String),
    /// Inconsistent configuration (footprint/kernel mismatch, bad stride, ...).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed file contents (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),
    /// Unknown parameter name.
    #[error("unknown parameter: {0}")]
    Lookup(String),
    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse (stale context, mismatched forward/backward pairing, ...).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
