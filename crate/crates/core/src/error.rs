use std::fmt;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged: non-finite gradient in parameter `{0}`")]
    TrainingDiverged(String),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
    #[error("empty sequence: {0}")]
    EmptySequence(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl fmt::Display) -> Error {
    Error::InvalidArgument(msg.to_string())
}

pub(crate) fn format_err(msg: impl fmt::Display) -> Error {
    Error::Format(msg.to_string())
}
