//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input data (shapes, ranges, non-finite values).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Objective refers to a layer, class, channel or vector the model cannot satisfy.
    #[error("invalid target: {0}")]
    InvalidTarget(String),

    /// An operation that needs at least one sample received none.
    #[error("empty dataset")]
    EmptyDataset,

    /// A binary container violated its format contract.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Non-finite value or failed numeric routine; `step` is the optimization
    /// step (or iteration) at which it occurred, when applicable.
    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    /// Unknown model plugin descriptor.
    #[error("unsupported model '{requested}'; available plugins: {available}")]
    UnsupportedModel { requested: String, available: String },

    /// Reference training did not reach the accuracy floor.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_target(msg: impl Into<String>) -> Self {
        Error::InvalidTarget(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn numeric(step: usize, msg: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            message: msg.into(),
        }
    }
}
