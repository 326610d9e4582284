use thiserror::Error;

/// Errors raised by the engine.
///
/// Variants map onto the CLI exit-code contract: configuration problems
/// exit with 2, numeric failures with 3 (see [`DnhError::exit_code`]).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DnhError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("capacity exceeded: hierarchy already has {0} levels")]
    Capacity(usize),

    #[error("invalid operation: {0}")]
    InvalidOperation(String),

    #[error("step size too large: objective grew from {start} to {current}")]
    StepSize { start: f64, current: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure at step {step}: {message}")]
    RunAborted { step: u64, message: String },
}

impl DnhError {
    pub fn exit_code(&self) -> i32 {
        match self {
            DnhError::Config(_) | DnhError::InvalidParameter(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, DnhError>;
