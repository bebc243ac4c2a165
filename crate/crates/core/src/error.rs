use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("invalid soft targets: {0}")]
    InvalidTargets(String),
    #[error("token list is empty")]
    EmptyTokenList,
    #[error("batch length mismatch: {texts} texts vs {audios} audios")]
    LengthMismatch { texts: usize, audios: usize },
    #[error("cache was built from different model parameters")]
    StaleCache,
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty pool: {0}")]
    EmptyPool(&'static str),
    #[error("domain-specific caption selection kept no captions; lower --sigma-ds")]
    EmptyDsCaptionSet,
    #[error("probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("prompt template must contain exactly one `{{}}` placeholder: {0:?}")]
    BadTemplate(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("insufficient data: need at least {needed} pairs, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("teacher and student dimensions are incompatible: {0}")]
    IncompatibleDims(String),
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { path: PathBuf, found: u64, expected: u64 },
    #[error("{path}:{line}: corrupt record: {reason}")]
    CorruptRecord { path: PathBuf, line: usize, reason: String },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, line: usize, reason: impl ToString) -> Self {
        Error::CorruptRecord { path: path.into(), line, reason: reason.to_string() }
    }
}
