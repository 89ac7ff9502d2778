use thiserror::Error;

/// Errors raised by the numerical kernels, estimators and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix: eigenvalue/pivot magnitude {magnitude:e} ({context})")]
    Singular { magnitude: f64, context: String },

    #[error("unstable system: largest eigenvalue real part {max_real:e}")]
    Unstable { max_real: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation produced a non-finite state at Euler step {step}")]
    Diverged { step: usize },

    #[error("insufficient samples: need more than {needed}, got {got}")]
    Length { needed: usize, got: usize },

    #[error("optimization failed to converge after {iterations} iterations")]
    Convergence { iterations: usize, trace: Vec<f64> },

    #[error("training loss became non-finite at epoch {epoch}; try a smaller learning rate")]
    Divergence { epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse failure class, used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Format(_) => ErrorClass::Config,
            Error::Io(_) => ErrorClass::Io,
            Error::Csv(e) if e.is_io_error() => ErrorClass::Io,
            Error::Csv(_) => ErrorClass::Config,
            _ => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
