use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input domain error: {0}")]
    InputDomain(String),

    #[error("input domain error at element {index}: {reason}")]
    ElementDomain { index: usize, reason: String },

    #[error("structural error in layer {layer}: {reason}")]
    Structural { layer: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("accumulator overflow: {0}")]
    Overflow(String),

    #[error("unsupported layer {layer} ({kind}): {hint}")]
    UnsupportedLayer {
        layer: usize,
        kind: String,
        hint: String,
    },

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("parameter `{param}` declares {expected} bytes but {actual} are available")]
    ByteCount {
        param: String,
        expected: usize,
        actual: usize,
    },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("wrong magic number 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic { expected: u32, found: u32 },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing data file {}: {hint}", path.display())]
    MissingData { path: PathBuf, hint: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error class, used by the command line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnsupportedLayer { .. } | Error::Structural { .. } => {
                ErrorClass::Config
            }
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn structural(layer: usize, reason: impl Into<String>) -> Self {
        Error::Structural {
            layer,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
