use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("audio error: {0}")]
    Audio(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }
}
