use std::path::PathBuf;

use loconet_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("version error: {0}")]
    Version(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Format { path: path.into(), detail: detail.to_string() }
    }

    /// Process exit code: 1 for usage and configuration mistakes, 2 for
    /// problems with data, shapes, files or checkpoints.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Tensor(TensorError::Usage(_) | TensorError::Config(_)) => 1,
            _ => 2,
        }
    }
}

/// Attaches a path to I/O errors.
pub trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
