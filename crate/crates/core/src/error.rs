use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("distribution parameter must be positive, got {0}")]
    NonPositiveParameter(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("corpus has {available} eligible words, {requested} requested")]
    InsufficientCorpus { requested: usize, available: usize },

    #[error("class `{class}` has {available} candidates, {requested} requested")]
    InsufficientCandidates {
        class: String,
        requested: usize,
        available: usize,
    },

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("label `{0}` not found in label space")]
    UnknownLabel(String),

    #[error("bad magic bytes in embedding bank")]
    BadMagic,

    #[error("truncated embedding bank: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("row {row} has norm {norm}, outside the accepted band")]
    NormViolation { row: usize, norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("gradient check failed: max relative error {worst:e} exceeds {limit:e}")]
    GradientCheck { worst: f64, limit: f64 },

    #[error("missing artifact {0}; run the producing stage first")]
    MissingArtifact(PathBuf),

    #[error("{artifact} was produced under config {found}, current config is {expected}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }
}
