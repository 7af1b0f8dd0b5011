use thiserror::Error;

/// Errors produced by the engine, the toy models and the trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("variance entry {index} is {value}; variances must be finite and > 0")]
    InvalidVariance { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: f64, max: usize },

    #[error("layer {index} out of range for depth {depth}")]
    LayerOutOfRange { index: usize, depth: usize },

    #[error("attention row {row} sums to {sum}; expected 1")]
    NotStochastic { row: usize, sum: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resampling found no accepted proposal within {0} iterations")]
    ResampleCapExceeded(usize),

    #[error("training diverged in {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
