use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition or a configuration is malformed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative solver or consistency check did not converge.
    #[error("numerical failure: {0}")]
    NonConvergence(String),

    /// Not enough counts or data points for the requested estimate.
    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NonConvergence(msg.into())
    }

    pub(crate) fn stats(msg: impl Into<String>) -> Self {
        Error::InsufficientStatistics(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Parse { .. } => 2,
            Error::NonConvergence(_) => 3,
            Error::InsufficientStatistics(_) => 4,
            Error::Io(_) => 1,
        }
    }
}
