use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema mismatch: expected `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid property vector: {0}")]
    InvalidVector(String),

    #[error("unknown value `{value}` for property `{property}`")]
    UnknownValue { property: String, value: String },

    #[error("duplicate property vector: {0}")]
    DuplicateVector(String),

    #[error("invalid sprite metadata:\n{}", .0.join("\n"))]
    SpriteRecords(Vec<String>),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("infeasible episode request: {0}")]
    Infeasible(String),

    #[error("invalid episode file: {0}")]
    InvalidEpisodes(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, episode `{episode}`")]
    NonFiniteLoss { epoch: usize, episode: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
