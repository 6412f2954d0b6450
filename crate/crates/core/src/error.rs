use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("empty document")]
    EmptyDocument,

    /// The document cannot be processed and is logged and skipped.
    #[error("excluded document: {0}")]
    Excluded(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema definition error in `{field}`: {reason}")]
    SchemaDefinition { field: String, reason: String },

    #[error("schema version mismatch: {0}")]
    SchemaVersion(String),

    /// An internal contract between pipeline stages was broken.
    #[error("consolidation contract violated: {0}")]
    Consolidation(String),

    #[error("document {0} is already indexed")]
    AlreadyIndexed(String),

    #[error("scenario failed: {0}")]
    Scenario(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Parquet(#[from] parquet::errors::ParquetError),

    #[error("schema syntax: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::SchemaDefinition {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
