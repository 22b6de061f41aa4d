use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter out of range: {0}")]
    ParamRange(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image size error: {0}")]
    Size(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sample count error: {0}")]
    SampleCount(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category, used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ParamRange(_) => ErrorKind::Config,
            Error::Shape(_) | Error::Size(_) | Error::SampleCount(_) => ErrorKind::Config,
            Error::Pairing(_) | Error::Format(_) | Error::Integrity(_) | Error::Image { .. } => {
                ErrorKind::Data
            }
            Error::Json(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::Divergence { .. } => ErrorKind::Numeric,
            Error::Io { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}
