use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Binary file decoding failures. Offsets are byte positions into the file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension overflow at offset {offset}: {detail}")]
    DimOverflow { offset: usize, detail: String },
    #[error("malformed content at offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid segments: {0}")]
    InvalidSegments(String),
    #[error("no masked frame carries a valid target")]
    EmptyMask,
    #[error("sequence has zero variance")]
    ZeroVariance,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("cannot access {}", path.display())]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad invocation.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidArgument(_))
    }
}
