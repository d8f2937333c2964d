use std::path::PathBuf;

use fino_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = FinoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FinoError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("cascade contract violated: {0}")]
    Cascade(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl FinoError {
    /// Numeric failures (NaN/Inf, divergence) as opposed to validation errors.
    pub fn is_numeric(&self) -> bool {
        match self {
            Self::Tensor(e) => e.is_numeric(),
            Self::NonFinite(_) | Self::Diverged { .. } => true,
            _ => false,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
