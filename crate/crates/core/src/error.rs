use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error in {op}: id {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("function is not deterministic: repeated evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFiniteLoss { step: u64, lr: f64, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("sweep cell {key}={value} seed={seed}: {source}")]
    Sweep {
        key: &'static str,
        value: usize,
        seed: u64,
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Data(_) | Error::EmptyCorpus => "data",
            Error::Determinism { .. } => "determinism",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(CheckpointError::ConfigMismatch(_)) => "config_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Sweep { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}")]
    Magic { found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload while reading {what}")]
    Truncated { what: String },

    #[error("unknown tensor names: {}", names.join(", "))]
    UnknownName { names: Vec<String> },

    #[error("missing tensors: {}", names.join(", "))]
    MissingName { names: Vec<String> },

    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
}
