//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or parameter shapes; names both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid experiment or module configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Non-finite values or other numeric breakdown mid-computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Math domain error (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
