use thiserror::Error;

/// Errors produced by grid construction, driver sampling, simulation and verification.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("invalid driver specification: {0}")]
    Driver(String),

    #[error("simulation aborted at t={time}: {reason}")]
    Simulation { time: f64, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
