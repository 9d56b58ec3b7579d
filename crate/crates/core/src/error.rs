use thiserror::Error;

/// Errors raised by the dataset, model, training and evaluation layers.
#[derive(Debug, Error)]
pub enum TltError {
    /// An argument lies outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A documented precondition does not hold for the inputs.
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// The supplied model lacks a required capability.
    #[error("capability error: {0}")]
    Capability(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The requested estimand is undefined on the supplied data.
    #[error("estimand undefined: {0}")]
    EstimandUndefined(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("training diverged at epoch {epoch}, step {step}; last good parameters restored")]
    Diverged { epoch: usize, step: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, TltError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(TltError::Domain(msg.into()))
}
