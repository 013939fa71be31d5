//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Expression text could not be parsed. `offset` is a byte offset into the input.
    #[error("parse error at byte {offset}: {msg}")]
    ExprParse { offset: usize, msg: String },

    /// Expression evaluation hit a domain error (division by zero, sqrt of negative).
    #[error("evaluation error: {0}")]
    ExprEval(String),

    /// A structural or dimensional constraint was violated. `field` names the offender.
    #[error("invalid {field}: {msg}")]
    Validation { field: String, msg: String },

    /// The explicit scheme's stability bound is violated.
    #[error("CFL violation: {0}")]
    Cfl(String),

    /// A solver produced a non-finite number.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A query point left the grid hull.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// Scenario file problem, with a 1-based line number where known.
    #[error("scenario error (line {line}): {msg}")]
    Scenario { line: usize, msg: String },

    /// Field/solution CSV problem, with a 1-based line number where known.
    #[error("csv error (line {line}): {msg}")]
    Csv { line: usize, msg: String },

    /// A sampled precondition failed (e.g. comparison-harness ordering).
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
