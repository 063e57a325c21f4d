use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("schema error at row {row}: missing mandatory field `{field}`")]
    MissingField { row: usize, field: String },

    #[error("row {row}: unknown {field} category {value:?}")]
    UnknownCategory {
        row: usize,
        field: String,
        value: String,
    },

    #[error("row {row}: duplicate user_id {user_id:?}")]
    DuplicateUser { row: usize, user_id: String },

    #[error("timestamps are not sorted ascending at position {index}")]
    Unsorted { index: usize },

    #[error("no user produced a KDE threshold; set sessionize.fallback_theta to proceed")]
    NoThreshold,

    #[error("timestamp {timestamp} precedes window epoch {epoch}")]
    BeforeEpoch { timestamp: i64, epoch: i64 },

    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),

    #[error("level {level:?} does not belong to attribute {attribute}")]
    UnknownLevel { attribute: String, level: String },

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("cluster-robust covariance needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error("template {template}: {message}")]
    Template { template: String, message: String },

    #[error("missing features for ad(s): {0:?}")]
    MissingFeatures(Vec<String>),

    #[error("structured output rejected: {reason}; raw response: {raw}")]
    Validation { reason: String, raw: String },

    #[error("backend transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid census prior: {0}")]
    Prior(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {path}; run `ad-audit {producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
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
