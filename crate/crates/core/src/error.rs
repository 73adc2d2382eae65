use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error in {}: {message} (byte offset {offset})", file.display())]
    Format {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("unsupported dtype code {code:#04x} in {} (only float32 = 0x01 is accepted)", file.display())]
    UnsupportedDtype { file: PathBuf, code: u8 },

    #[error("dimension overflow in {}: {dims:?} does not fit in a 2^63 byte payload", file.display())]
    DimOverflow { file: PathBuf, dims: Vec<u64> },

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingFailure { step: u64, loss: f64 },

    #[error("probe fit failed: {0}")]
    FitFailure(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }
}
