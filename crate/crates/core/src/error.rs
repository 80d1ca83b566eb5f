use thiserror::Error;

/// Errors raised anywhere in the monitoring pipeline.
///
/// The variants are grouped by what the caller can do about them: fix the
/// input file (`Parse`, `Validation`), fix the configuration (`Config`,
/// `Range`), or inspect the model (`ModelInconsistency`, `Numeric`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
