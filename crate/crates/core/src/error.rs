use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A malformed container or checkpoint. Offsets are byte positions in the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}")]
    BadMagic { offset: u64, expected: &'static str },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("invalid header field `{field}` = {value} at offset {offset}")]
    InvalidHeader {
        offset: u64,
        field: &'static str,
        value: u64,
    },
    #[error("reserved flag bits {flags:#x} set at offset {offset}")]
    ReservedFlags { offset: u64, flags: u32 },
    #[error("truncated input at offset {offset}: need {needed} bytes, have {available}")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("label {label} out of range for {num_classes} classes at offset {offset}")]
    LabelOutOfRange {
        offset: u64,
        label: u32,
        num_classes: u32,
    },
    #[error("group field {group:#x} inconsistent with groups flag at offset {offset}")]
    GroupMismatch { offset: u64, group: u32 },
    #[error("non-finite float at offset {offset}")]
    NonFinite { offset: u64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Decode(#[from] FormatError),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("config key `{key}`: {message}")]
    ConfigValue { key: String, message: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("cannot train detector: {0}")]
    UntrainableDetector(String),
    #[error("singular Gram matrix (rank-deficient basis with zero ridge)")]
    SingularGram,
    #[error("rank-deficient feature matrix: {0}")]
    RankDeficient(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shortcut loss vanished ({value:e}); the detector no longer carries label information")]
    VanishedDenominator { value: f64 },
}

/// Coarse error category, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::ConfigValue { .. } | Error::InvalidArgument(_) => {
                ErrorKind::Config
            }
            Error::SingularGram
            | Error::NonFinite(_)
            | Error::VanishedDenominator { .. }
            | Error::RankDeficient(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
