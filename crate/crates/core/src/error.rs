use std::path::PathBuf;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("input of {len} tokens exceeds context length {max}")]
    ContextLength { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
