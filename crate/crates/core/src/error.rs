//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants map onto the
//! CLI exit-code contract: usage problems exit 1, data problems (I/O, decode,
//! checkpoint, config) exit 2, verification failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's requirements.
    #[error("shape error: {0}")]
    Shape(String),
    /// An API contract was violated (e.g. backward from a non-scalar root).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or truncated serialized data (checkpoints, images).
    #[error("format error: {0}")]
    Format(String),
    /// Missing or unusable input data.
    #[error("data error: {0}")]
    Data(String),
    /// A numerical check did not hold.
    #[error("verification failure: {0}")]
    Verification(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn verification(msg: impl Into<String>) -> Self {
        Error::Verification(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
