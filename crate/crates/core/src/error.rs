use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid layer index {index} (generator has {count} layers)")]
    InvalidLayer { index: usize, count: usize },
    #[error("replay record mismatch: {0}")]
    Replay(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("invalid blueprint: {0}")]
    Blueprint(String),
    #[error("infeasible blueprint: {0}")]
    Infeasible(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
