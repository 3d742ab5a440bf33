use crate::tensor::TensorError;

/// Errors from the model-level modules (backbone, control, fusion, enhance).
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("feature levels do not line up: {0}")]
    LevelMismatch(String),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("attention pyramid is empty")]
    EmptyPyramid,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("token index {index} out of range for {count} keys")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
