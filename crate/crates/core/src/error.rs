use std::path::PathBuf;

/// Errors raised while decoding an SCIV volume file.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"SCIV\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated file: header declares {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("trailing data: {0} bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite values produced by `{0}`")]
    NonFinite(String),
    #[error("no valid placement: {0}")]
    NoPlacement(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Decode(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}

pub(crate) use invalid;
pub(crate) use shape_err;
