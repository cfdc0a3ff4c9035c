use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TasError {
    #[error(transparent)]
    Tensor(#[from] tas_tensor::TensorError),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TasError>;

pub(crate) fn contract<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TasError::Contract { op, msg: msg.into() })
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TasError {
    let path = path.into();
    move |source| TasError::Io { path, source }
}
