use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine could not produce a usable result
    /// (factorization breakdown, non-finite intermediate, no descent step).
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A closed-loop episode was cut short; `step` is the index of the
    /// control step that failed.
    #[error("episode aborted at step {step}: {reason}")]
    EpisodeAborted { step: usize, reason: String },

    /// A serialized record or file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }
}
