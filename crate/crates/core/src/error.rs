use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("unknown token id {id} (vocabulary size {size})")]
    Vocabulary { id: usize, size: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("guidance error at step t={step}: {reason}")]
    Guidance { step: usize, reason: String },
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Parameter(_)
                | Error::Vocabulary { .. }
                | Error::Usage(_)
                | Error::Config(_)
                | Error::Validation(_)
                | Error::Parse { .. }
        )
    }
}
