use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid trace document: {0}")]
    InvalidDocument(String),

    #[error("invalid interval [{start}, {end}]")]
    InvalidInterval { start: f64, end: f64 },

    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group of size {0} is too small, need at least 2")]
    GroupTooSmall(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("metrics schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("malformed parameter file: {0}")]
    ParamFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
