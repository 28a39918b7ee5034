use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("{n_classes} classes cannot be split evenly into {n_tasks} tasks")]
    UnevenSplit { n_classes: usize, n_tasks: usize },

    #[error("blur scale {blur_scale} exceeds the {task_len} samples of task {task}")]
    BlurTooWide {
        blur_scale: usize,
        task: usize,
        task_len: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("parameter layout mismatch: {left} vs {right} values")]
    Layout { left: usize, right: usize },

    #[error("replay item {0} is no longer resident")]
    StaleItem(u64),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no memory exemplar for classes {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing metric: {0}")]
    MissingMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
