use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{path}: row {row}: {message}")]
    Csv { path: PathBuf, row: usize, message: String },

    #[error("split block `{block}` has {len} steps but a window needs {needed}")]
    BlockTooShort {
        block: &'static str,
        len: usize,
        needed: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("window {0} has no observed steps")]
    FullyMasked(usize),

    #[error("unknown series id {id} (table has {n} rows)")]
    UnknownSeries { id: usize, n: usize },

    #[error("non-finite activation in stage `{0}`")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("local mode needs {needed} weights which exceeds the budget of {budget}")]
    MemoryBudget { needed: usize, budget: usize },

    #[error("malformed weight container: {0}")]
    Container(String),

    #[error("model card: {0}")]
    Card(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
