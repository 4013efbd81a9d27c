//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector lengths do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An input or result left the valid numeric domain (NaN, Inf, negative
    /// under a square root, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A serialized chunk could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    /// An operation was called in the wrong state or phase.
    #[error("state error: {0}")]
    State(String),

    /// The run produced a non-finite loss or iterate; carries diagnostics.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
