//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something structurally invalid (bad grid spec, mismatched
    /// lengths, non-finite parameter, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two objects that must live on the same grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Query point left the domain of a non-periodic dimension.
    #[error("coordinate {value} outside [{min}, {max}] in dim {dim}")]
    OutOfDomain {
        dim: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    /// A solver produced a non-finite value; `step` is the accepted step index.
    #[error("numeric failure at solver step {step}: {what}")]
    Numeric { step: usize, what: String },

    /// A runtime rule of the coordination protocol was broken.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A file exists but its contents are not what the format requires.
    #[error("malformed file {path}: {what}")]
    Format { path: String, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
