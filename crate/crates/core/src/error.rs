use std::path::PathBuf;

use pdarts_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("edge ({from}, {to}): {reason}")]
    Edge { from: usize, to: usize, reason: String },

    #[error("degenerate snapshot: {0}")]
    Degenerate(String),

    #[error(
        "non-finite loss in stage {stage}, epoch {epoch}, batch {batch} \
         (lr_w {lr_w:e}, lr_alpha {lr_alpha:e}): {source}"
    )]
    Diverged {
        stage: usize,
        epoch: usize,
        batch: usize,
        lr_w: f64,
        lr_alpha: f64,
        source: TensorError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: at `{field}`: {message}")]
    Parse {
        path: String,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error("{0}")]
    Usage(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("check failed: {0}")]
    Check(String),
}

impl Error {
    /// Short category used in the machine-readable error line of the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Edge { .. } => "edge",
            Error::Degenerate(_) => "degenerate",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Dataset(_) => "dataset",
            Error::Usage(_) => "usage",
            Error::Locked(_) => "locked",
            Error::Check(_) => "check",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Problems found while decoding a PDTS dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("bad magic at byte 0: expected \"PDTS\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported format version {version} at byte 4")]
    UnsupportedVersion { version: u16 },

    #[error("truncated payload: {what} needs {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("label {label} of image {index} at byte {offset} is not below the class count {classes}")]
    LabelOutOfRange {
        index: usize,
        offset: usize,
        label: u8,
        classes: u32,
    },

    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },

    #[error("header field {field} = {value} is out of range")]
    Header { field: &'static str, value: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;
