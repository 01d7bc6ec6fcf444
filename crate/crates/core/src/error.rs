use crate::store::StoreError;
use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    /// True for artifact-compatibility failures, which the CLI reports
    /// with a dedicated exit code.
    pub fn is_incompatible(&self) -> bool {
        matches!(
            self,
            Error::Incompatible(_) | Error::Store(StoreError::HashMismatch { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
