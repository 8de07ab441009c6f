use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{file}: expected {expected} bytes ({detail}), found {found}")]
    SizeMismatch {
        file: String,
        expected: usize,
        found: usize,
        detail: String,
    },

    #[error("{file}: row {row} has L2 norm {norm}, expected 1 within {tolerance}")]
    NotNormalized {
        file: String,
        row: usize,
        norm: f64,
        tolerance: f64,
    },

    #[error("{file}: invalid value at index {index}: {reason}")]
    InvalidValue {
        file: String,
        index: usize,
        reason: String,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("zero-norm vector in {what} (row {row})")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label budget of {requested} per class exceeds class {class} with {available} train samples")]
    Budget {
        requested: usize,
        class: usize,
        available: usize,
    },

    #[error("need {needed} classes with at least 2 train samples, found {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("error matrix has no off-diagonal confusions")]
    NoConfusions,

    #[error("synthetic generation failed: {0}")]
    Synth(String),

    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::SizeMismatch { .. } => "dimension_mismatch",
            Error::NotNormalized { .. } => "not_normalized",
            Error::InvalidValue { .. } => "invalid_value",
            Error::Manifest(_) => "invalid_manifest",
            Error::Shape { .. } => "shape_mismatch",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty_input",
            Error::Config(_) => "invalid_config",
            Error::Budget { .. } => "budget_infeasible",
            Error::InsufficientClasses { .. } => "insufficient_classes",
            Error::NoConfusions => "no_confusions",
            Error::Synth(_) => "synth_failed",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
