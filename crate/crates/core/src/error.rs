use thiserror::Error;
use trunkshare_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub(crate) fn format(path: impl std::fmt::Display, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
