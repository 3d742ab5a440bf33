use sesa_core::tensor::ContainerError;
use sesa_metrics::MetricError;
use sesa_semantics::SemanticsError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Container(#[from] ContainerError),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("loss is NaN at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error(transparent)]
    Core(#[from] sesa_core::Error),
    #[error(transparent)]
    Metrics(#[from] MetricError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

impl From<sesa_core::TensorError> for HarnessError {
    fn from(e: sesa_core::TensorError) -> Self {
        HarnessError::Core(e.into())
    }
}

impl HarnessError {
    /// 2 usage, 3 data, 4 numeric, 5 network.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Config { .. } => 2,
            HarnessError::NanLoss { .. }
            | HarnessError::Metrics(MetricError::NumericalInstability(_))
            | HarnessError::Core(sesa_core::Error::Tensor(sesa_core::TensorError::NonFiniteInput { .. })) => 4,
            HarnessError::Semantics(e) if e.is_network() => 5,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}
