use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky factorization kept failing after jitter escalation.
    #[error("numerical failure: {what} (final jitter {jitter:e})")]
    NumericalFailure { what: String, jitter: f64 },

    /// An operation was called on an object in the wrong state (e.g. predict before fit).
    #[error("invalid state: {0}")]
    State(String),

    /// An iterative procedure stopped making progress.
    #[error("progress failure: {0}")]
    Progress(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
