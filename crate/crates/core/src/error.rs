use thiserror::Error;

/// Errors raised while building grids, measures and samples, or while
/// running a verification suite.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("level {level} out of range 1..={k}")]
    LevelOutOfRange { level: usize, k: usize },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A sampler hit its atom or branching cap before its tail bound was met.
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
