use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: file not found", .0.display())]
    Missing(PathBuf),
    #[error("{}: unsupported image format ({1})", .0.display())]
    UnsupportedFormat(PathBuf, String),
    #[error("{}: corrupt or unreadable file: {1}", .0.display())]
    Corrupt(PathBuf, String),
    #[error("{}: cannot write: {1}", .0.display())]
    Write(PathBuf, String),
    #[error("{op}: shape mismatch ({lhs} vs {rhs})")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{}: bad .flo magic {1:?}", .0.display())]
    BadFloMagic(PathBuf, [u8; 4]),
    #[error("{}: truncated .flo payload (expected {1} bytes, found {2})", .0.display())]
    TruncatedFlo(PathBuf, usize, usize),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {}: {1}", .0.display())]
    Checkpoint(PathBuf, String),
    #[error("non-finite loss at epoch {epoch}, step {step}; batch: {}", samples.join(", "))]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        samples: Vec<String>,
    },
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Tensor(#[from] ea_tensor::TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: format!("{}x{}", lhs.0, lhs.1),
        rhs: format!("{}x{}", rhs.0, rhs.1),
    }
}
