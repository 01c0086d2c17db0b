use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point not covered by any leaf of the partition")]
    NotCovered,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("point coordinate {value} outside [0,1] at axis {axis}")]
    OutOfUnitCube { axis: usize, value: f64 },

    #[error("eigendecomposition failed")]
    EigenFailure,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: usize, message: String },

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        Error::MalformedCsv {
            line,
            message: e.to_string(),
        }
    }
}
