//! Crate-wide error type.
//!
//! Errors are split by how a caller should react: `Validation` and
//! `Shape` mean the inputs violate a documented precondition, `Format`
//! means a file is malformed (with the byte offset where parsing gave
//! up), `UndefinedMetric` flags a score whose denominator vanished, and
//! `Numeric` reports non-finite values where the math requires finite
//! ones (e.g. NaN gradients).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for errors caused by bad user input (as opposed to internal
    /// failures). The CLI maps these to a distinct exit code.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Shape(_) | Error::Format { .. } | Error::UndefinedMetric(_)
        )
    }
}
