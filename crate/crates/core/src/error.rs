use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({lat}, {lon}) lies outside the grid")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("location id {id} is not valid for city {city} ({count} locations)")]
    UnknownLocation { city: u32, id: usize, count: usize },
    #[error("unknown city {0}")]
    UnknownCity(u32),
    #[error("bucket index {index} out of range for {table} table of {size} rows")]
    BucketOutOfRange { table: &'static str, index: usize, size: usize },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint mismatch in `{field}`: expected {expected}, found {found}")]
    CheckpointMismatch { field: String, expected: String, found: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
