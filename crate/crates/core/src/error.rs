use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("mixing time exceeds the cap of {cap} steps")]
    MixingCapExceeded { cap: usize },

    #[error("steady-state matrix is singular")]
    SingularMatrix,

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("trace diverged")]
    Diverged,

    #[error("{0}")]
    Insufficient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
