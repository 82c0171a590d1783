use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("under-resolved: {0}")]
    UnderResolved(String),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("not admissible: {0}")]
    NotAdmissible(String),
    #[error("solver did not converge after {iterations} iterations (value {value:.6e}, residual {residual:.3e})")]
    NonConvergence {
        value: f64,
        iterations: usize,
        residual: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
