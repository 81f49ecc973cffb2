use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, length).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value was produced by the named primitive.
    #[error("numeric failure in `{primitive}`: {detail}")]
    Numeric { primitive: String, detail: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Stored artifact does not match the expected layout (dimension, scale table, version).
    #[error("schema error: {0}")]
    Schema(String),

    /// Checksum mismatch or truncated record.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("insufficient history for series `{series}` at anchor {anchor}: first satisfiable anchor is {first_anchor}")]
    InsufficientHistory {
        series: String,
        anchor: i64,
        first_anchor: i64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
