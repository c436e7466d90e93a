use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {label} out of range for {n_labels} labels")]
    InvalidLabel { label: usize, n_labels: usize },

    #[error("randomisation value u = {0} is outside [0, 1]")]
    InvalidUniform(f64),

    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("all model weights are zero")]
    ZeroWeights,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stream schema error: {0}")]
    Schema(String),

    #[error("malformed stream row {row}: {msg}")]
    MalformedRow { row: u64, msg: String },

    #[error("row {row}: probabilities sum to {sum}, not 1")]
    NotSimplex { row: u64, sum: f64 },

    #[error("model count mismatch: expected {expected}, found {found} (t = {t})")]
    ModelCountMismatch { t: u64, expected: usize, found: usize },

    #[error("unknown oracle `{0}`")]
    UnknownOracle(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
