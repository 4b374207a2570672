use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("{path}: truncated payload: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { path: PathBuf, dims: Vec<u64> },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },

    #[error("{path}: unsupported data type code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("{path}: compressed input is not supported; decompress it first")]
    Compressed { path: PathBuf },

    #[error("non-finite value produced at {location}")]
    NonFinite { location: String },

    #[error("label volume contains no tumor voxels")]
    NoTumor,

    #[error("region of interest is empty")]
    EmptyRoi,

    #[error("{0}")]
    Unsupported(String),
}

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Format,
    Numeric,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape { .. }
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::NoTumor
            | Error::EmptyRoi
            | Error::Unsupported(_) => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
            Error::MalformedHeader { .. }
            | Error::Truncated { .. }
            | Error::DimensionOverflow { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedDatatype { .. }
            | Error::Compressed { .. } => ErrorCategory::Format,
            Error::NonFinite { .. } => ErrorCategory::Numeric,
        }
    }
}
