use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorShape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape([usize; 4]),

    #[error("element count of shape {0:?} overflows usize")]
    ShapeOverflow([usize; 4]),

    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch { op: &'static str, expected: TensorShape, actual: TensorShape },

    #[error("{op}: {detail}")]
    Incompatible { op: &'static str, detail: String },

    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength { len: usize, shape: TensorShape, expected: usize },

    #[error("{op}: spatial extent {height}x{width} must be divisible by {multiple}")]
    NotDivisible { op: &'static str, height: usize, width: usize, multiple: usize },

    #[error("layer tape mismatch: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("file truncated ({0} bytes)")]
    Truncated(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("tensor names do not match the configuration: missing {missing:?}, unexpected {unexpected:?}")]
    NameMismatch { missing: Vec<String>, unexpected: Vec<String> },
}
