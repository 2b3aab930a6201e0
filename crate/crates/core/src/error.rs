//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input data: malformed files, out-of-range indices, invalid
    /// configuration. CLI maps these to exit code 2.
    #[error("validation: {0}")]
    Validation(String),

    /// Illegal action for the current environment state.
    #[error("illegal action {action}: {reason}")]
    IllegalAction { action: u32, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed checkpoint or incompatible dimensions.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Numerical failure at runtime (divergence, non-finite loss).
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::IllegalAction { .. })
    }
}
