use std::io;

use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are grouped so a front end can map them onto coarse exit codes
/// through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("non-finite scalar at index {index}")]
    NonFiniteInput { index: usize },
    #[error("tensor is empty")]
    EmptyTensor,
    #[error("shape {shape:?} holds {expected} scalars but data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("{name} must be positive")]
    ZeroLength { name: &'static str },
    #[error("array length {array_len} is not a multiple of block length {block_len}")]
    NotMultiple { block_len: usize, array_len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown format name {0:?}")]
    UnknownFormat(String),
    #[error("input data is empty")]
    EmptyData,
    #[error("need at least {needed} blocks, found {found}")]
    TooFewBlocks { needed: usize, found: usize },
    #[error("codebook family mismatch: {0}")]
    FamilyMismatch(String),
    #[error("malformed codebook family: {0}")]
    MalformedFamily(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("reference tensor is all zeros")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Coarse error classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters, configuration, or experiment description.
    Validation,
    /// Input data that cannot be used (bad files, NaN, empty tensors).
    Data,
    /// A stream or tensor was matched with the wrong codebook family.
    FamilyMismatch,
    /// An encoded stream failed structural checks.
    CorruptStream,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidDistribution(_) | ZeroLength { .. } | NotMultiple { .. } | InvalidConfig(_)
            | UnknownFormat(_) | InvalidExperiment(_) => ErrorKind::Validation,
            FamilyMismatch(_) => ErrorKind::FamilyMismatch,
            CorruptStream(_) => ErrorKind::CorruptStream,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
