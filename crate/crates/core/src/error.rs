use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("block {block} out of range 1..={depth}")]
    BlockOutOfRange { block: usize, depth: usize },

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("model has no classification head")]
    MissingHead,

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. }) || matches!(self, Error::Archive(ArchiveError::Io(_)))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Structural problems with a weight archive file.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive truncated: need {needed} bytes, file has {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: unknown dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },

    #[error("tensor `{name}`: extent {offset}+{length} exceeds payload of {payload} bytes")]
    OutOfBounds {
        name: String,
        offset: u64,
        length: u64,
        payload: u64,
    },

    #[error("tensors `{first}` and `{second}` overlap")]
    Overlap { first: String, second: String },

    #[error("tensor `{name}`: length {length} does not match shape {shape:?} ({expected} bytes)")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        length: u64,
        expected: u64,
    },

    #[error("tensor `{name}` has dtype {actual}, expected {expected}")]
    WrongDtype {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
