//! Crate-wide error type.
//!
//! Two broad categories mirror how callers react: `Validation` means the input
//! data or configuration violates a documented contract (fix the data),
//! `Computation` means a numeric procedure could not complete on valid-looking
//! input (rank deficiency, separation, degenerate weights, ...).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a contract (bad panel, bad schema,
    /// out-of-range option). CLI maps this to exit code 1.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric procedure failed on structurally valid input (rank-deficient
    /// design, logit separation, zero residual treatment variation, ...).
    /// CLI maps this to exit code 2.
    #[error("computation error: {0}")]
    Computation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used throughout the crate.
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }

    /// Process exit code for the command-line front end: input and validation
    /// problems exit 1, computation failures exit 2.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Computation(_) => 2,
            _ => 1,
        }
    }
}
