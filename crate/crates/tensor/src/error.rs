use std::fmt;

/// Errors raised by tensor construction, graph operations and serialization.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        TensorError::Shape { op, detail: detail.to_string() }
    }

    pub(crate) fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        TensorError::Shape { op, detail: format!("incompatible shapes {a:?} and {b:?}") }
    }
}
