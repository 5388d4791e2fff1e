use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("duplicate county id `{0}`")]
    DuplicateId(String),
    #[error("unknown county ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("county sets differ: only in left [{}], only in right [{}]", .only_left.join(", "), .only_right.join(", "))]
    CountyMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },
    #[error("invalid value: {0}")]
    Domain(String),
    #[error("zero distance between counties `{a}` and `{b}`")]
    DegenerateDistance { a: String, b: String },
    #[error("flow matrix is not symmetric (max deviation {max_deviation:e})")]
    Asymmetric { max_deviation: f64 },
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("tape already consumed by a previous reverse pass")]
    StaleTape,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
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
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
