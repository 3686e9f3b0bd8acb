use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LomitError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint format version {found} (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T, E = LomitError> = std::result::Result<T, E>;

impl LomitError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        LomitError::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LomitError::Dimension(msg.into()))
}
