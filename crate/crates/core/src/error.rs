use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("pool exhausted: {0}")]
    PoolExhausted(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
