use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame index {index} out of range for a model with {n_frames} frames")]
    IndexOutOfRange { index: usize, n_frames: usize },

    #[error("{n_frames} frames exceeds the {operation} guard of {limit} frames")]
    Intractable {
        operation: &'static str,
        n_frames: usize,
        limit: usize,
    },

    #[error("invalid discrete model: {0}")]
    InvalidModel(String),

    #[error("frame {index} has dimension {found}, expected {expected}")]
    FrameDimension {
        index: usize,
        found: usize,
        expected: usize,
    },

    #[error("example needs at least one positive and one negative frame")]
    DegenerateLabels,

    #[error("no usable training examples ({skipped} skipped for lacking positives or negatives)")]
    NoUsableExamples { skipped: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Malformed-input classes for the on-disk formats. Each has its own variant.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("truncated file: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("config mismatch on {field}: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid config block: {0}")]
    InvalidConfig(String),

    #[error("invalid utf-8 in tensor name")]
    InvalidName,

    #[error("annotation record {record}: {message}")]
    Annotation { record: usize, message: String },
}
