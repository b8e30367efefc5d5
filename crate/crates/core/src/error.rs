use std::io;
use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("missing artifact {}: run stage `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! validation {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}

pub(crate) use format_err;
pub(crate) use validation;
