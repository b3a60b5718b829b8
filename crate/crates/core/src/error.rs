use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("outcome {outcome} has zero likelihood for every particle at step {step}")]
    ImpossibleOutcome { step: usize, outcome: i64 },
    #[error("likelihood {value} outside [0, 1] at step {step}")]
    InvalidLikelihood { step: usize, value: f64 },
    #[error("non-finite control {value} at step {step}")]
    NonFiniteControl { step: usize, value: f64 },
    #[error("singular Fisher information: {0}")]
    SingularFisher(String),
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
