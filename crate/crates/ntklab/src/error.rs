//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration failed validation before any computation started.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Array arguments had incompatible or unexpected shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A LAPACK-backed decomposition failed to converge or rejected its input.
    #[error("linear algebra failure: {0}")]
    Linalg(String),

    /// A computed quantity violated a numerical precondition (non-finite
    /// values, kernel not positive semi-definite, and so on).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An operation was asked of an architecture or mode that does not
    /// support it.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The requested computation would exceed the configured memory budget.
    #[error("memory budget exceeded: {0}")]
    Memory(String),

    /// A data file was missing, truncated, or malformed.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
