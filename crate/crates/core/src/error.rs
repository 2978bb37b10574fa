use std::path::PathBuf;

use crate::tree::NodeId;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed {what}: {source}")]
    Json {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },

    #[error("{what} has format version {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("sequence of length {0} cannot be split into features and ground truth")]
    Unsplittable(usize),

    #[error("duplicate item id {0}")]
    DuplicateItem(u64),

    #[error("unknown item id {0}")]
    UnknownItem(u64),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("level {requested} is invalid here (limit {limit})")]
    Level { requested: usize, limit: usize },

    #[error("node {0} is the root and has no parent")]
    Root(NodeId),

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("checkpoint is corrupted: {0}")]
    Corrupted(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
