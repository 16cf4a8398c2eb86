use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid clip {id}: {reason}")]
    Clip { id: String, reason: String },
    #[error("malformed motion file: {0}")]
    Format(String),
    #[error("empty clip library")]
    EmptyLibrary,
    #[error("action must be {expected} finite values, got {got:?}")]
    Action { expected: usize, got: Vec<f64> },
    #[error("clip exhausted at frame {frame} of {len}")]
    ClipExhausted { frame: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
