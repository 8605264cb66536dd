use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "Newton solver failed at step {step}: residual {residual:e} after {iterations} iterations"
    )]
    SolverFailure {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
