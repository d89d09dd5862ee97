use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} {index} >= {limit}")]
    IndexOutOfRange {
        what: String,
        index: usize,
        limit: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid asset: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate bone between {from} and {to}")]
    DegenerateBone { from: String, to: String },
    #[error("unfillable gap: {0}")]
    Unfillable(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
