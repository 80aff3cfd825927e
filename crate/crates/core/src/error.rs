use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("BCH product supports nilpotency step <= 4, algebra has step {0}")]
    UnsupportedStep(usize),

    #[error("invalid algebra definition: {0}")]
    InvalidAlgebra(String),

    #[error("invalid group model: {0}")]
    InvalidModel(String),

    #[error("unknown model label `{0}`")]
    UnknownModel(String),

    #[error("unknown {what} `{name}`")]
    UnknownName { what: &'static str, name: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("cylinder functional has no coordinate partials")]
    MissingPartials,

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("integration blew up at step {step} (norm {norm:e})")]
    Blowup { step: usize, norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LabError::DimensionMismatch { expected, got })
    }
}
