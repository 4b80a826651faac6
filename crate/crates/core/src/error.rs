use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("dangling endpoint: edge ({0}, {1}) references undeclared node `{2}`")]
    DanglingEndpoint(String, String, String),
    #[error("disconnected graph: node `{0}` is unreachable from `{1}`")]
    Disconnected(String, String),
    #[error("empty targets")]
    EmptyTargets,
    #[error("invalid target `{0}`: {1}")]
    InvalidTarget(String, String),

    #[error("schema violation: {0}")]
    Schema(String),
    #[error("non-hourly timestamps at row {row}: {prev} -> {next}")]
    NonHourly { row: usize, prev: String, next: String },
    #[error("gap exceeds interpolation limit: channel `{channel}` missing {hours} consecutive hours starting {start}")]
    GapTooLong {
        channel: String,
        hours: usize,
        start: String,
    },
    #[error("channel `{channel}` references unknown node `{node}`")]
    UnknownNode { channel: String, node: String },
    #[error("frame too short: T={t} < w+k={needed}")]
    FrameTooShort { t: usize, needed: usize },
    #[error("empty {0} side after split")]
    EmptySplit(&'static str),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("divergence at epoch {epoch} (learning rate {lr}): loss {loss}")]
    Divergence { epoch: usize, lr: f64, loss: f64 },
    #[error("attention extraction not supported for architecture `{0}`")]
    NotSupported(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty test set")]
    EmptyTestSet,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
