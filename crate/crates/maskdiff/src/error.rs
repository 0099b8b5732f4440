use thiserror::Error;

/// Errors raised by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad schedule bounds, negative rates, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A timestep or element index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid input data (empty sets, images too small, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A checkpoint archive is missing, malformed, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or hit an unrecoverable state.
    #[error("training fault: {0}")]
    Train(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
