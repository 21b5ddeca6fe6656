//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A leapfrog trajectory produced a non-finite state.
    #[error("divergent trajectory at integrator step {step}")]
    Divergence { step: usize },

    /// A fit or estimate encountered a non-finite value.
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Constant input where a variance is required.
    #[error("effective sample size undefined: {0}")]
    UndefinedEss(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
