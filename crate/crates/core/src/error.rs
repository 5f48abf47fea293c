use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed store header: {0}")]
    MalformedHeader(String),

    #[error("row count mismatch: header declares {header} rows, metadata has {metadata}")]
    RowCountMismatch { header: usize, metadata: usize },

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("invalid metadata at line {line}: {message}")]
    InvalidMetadata { line: usize, message: String },

    #[error("unknown dataset tag {0:?}")]
    UnknownDataset(String),

    #[error("store is empty")]
    EmptyStore,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("direction mismatch between activation results")]
    DirectionMismatch,

    #[error("dataset too small: need more than {needed} rows, have {actual}")]
    DatasetTooSmall { needed: usize, actual: usize },

    #[error("histogram bin ranges differ")]
    BinMismatch,

    #[error("both histograms are empty")]
    EmptyHistograms,

    #[error("token {0:?} does not occur in the dataset")]
    TokenAbsent(String),

    #[error("annotation error: {0}")]
    Annotation(#[from] crate::annotation::AnnotationError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code for machine-readable error reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed-header",
            Error::RowCountMismatch { .. } => "row-count-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidMetadata { .. } => "invalid-metadata",
            Error::UnknownDataset(_) => "unknown-dataset",
            Error::EmptyStore => "empty-store",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::OutOfRange { .. } => "out-of-range",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DirectionMismatch => "direction-mismatch",
            Error::DatasetTooSmall { .. } => "dataset-too-small",
            Error::BinMismatch => "bin-mismatch",
            Error::EmptyHistograms => "empty-histograms",
            Error::TokenAbsent(_) => "token-absent",
            Error::Annotation(e) => e.code(),
            Error::Json(_) => "json",
        }
    }
}
