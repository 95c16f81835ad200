use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("state out of bounds: {0}")]
    OutOfBounds(String),
    #[error("backward called without a recorded forward pass")]
    NoForwardPass,
    #[error("degenerate anchors: sim={sim} real={real}")]
    DegenerateAnchors { sim: f64, real: f64 },
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("unknown name: {0}")]
    Unknown(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
