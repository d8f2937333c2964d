use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("function is not deterministic: two evaluations gave {0:e} and {1:e}")]
    Nondeterministic(f64, f64),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Shape {
            op,
            msg: msg.into(),
        }
    }

    /// True for numeric failures (NaN/Inf) as opposed to contract violations.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::NonFinite { .. } | Self::Nondeterministic(..))
    }
}
