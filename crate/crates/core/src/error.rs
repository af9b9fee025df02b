use std::io;

use thiserror::Error;

/// Errors raised by every layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate attention row {row}: every key is masked")]
    DegenerateAttention { row: usize },

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("audio underrun: need {needed} frames, have {available}")]
    AudioUnderrun { needed: usize, available: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
