use std::path::PathBuf;

/// Errors produced by the recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty alphabet")]
    EmptyAlphabet,

    #[error("unknown character {ch:?} at offset {offset}")]
    UnknownChar { ch: char, offset: usize },

    #[error("invalid token id {id} (vocabulary has {rows} embedding rows)")]
    InvalidToken { id: u32, rows: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line overflow: line {line} needs {needed}px, page column has {available}px")]
    LineOverflow {
        line: usize,
        needed: usize,
        available: usize,
    },

    #[error("image {height}x{width} is too small, need at least 32x8")]
    ImageTooSmall { height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("divergence at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("undefined normalization: ground truth is empty")]
    UndefinedNormalization,

    #[error("empty training split")]
    EmptyTrainingSplit,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
