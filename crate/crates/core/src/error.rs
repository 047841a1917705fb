//! Error taxonomy shared across the crate.
//!
//! Variants map onto process exit codes in the CLI: usage/contract errors
//! exit 1, data/format errors exit 2, numeric divergence exits 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside its documented domain (negative temperature,
    /// out-of-range timestep, bad guidance weight, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract (non-scalar loss, unnormalized
    /// probability table, inconsistent configuration).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values or a diverging computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
