use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains no tokens")]
    EmptyInput,

    #[error("prediction contains no tokens")]
    EmptyPrediction,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("embedder produces {embedder}-dim vectors but the store holds {store}-dim vectors")]
    UnknownEmbedderDim { embedder: usize, store: usize },

    #[error("vector has zero or non-finite norm")]
    DegenerateVector,

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { expected: u8, found: u8 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("invalid adapter id {0:?}")]
    InvalidAdapterId(String),

    #[error("adapter {0} is already registered")]
    DuplicateId(String),

    #[error("adapter {0} is not registered")]
    UnknownId(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("adapter {adapter} does not adapt layer {layer}")]
    LayerNotAdapted { adapter: String, layer: usize },

    #[error("invalid mix plan: {0}")]
    InvalidPlan(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("remote embedder: {0}")]
    Remote(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
