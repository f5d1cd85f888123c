use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so callers (notably the CLI) can map them onto
/// stable exit classes: configuration/validation problems, runtime
/// failures, and IO failures.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("mask '{name}' is not binary: voxel value {value} found")]
    NonBinaryMask { name: String, value: f64 },

    #[error("invalid normalization record: max_value = {0}, must be > 0")]
    InvalidNormRecord(f64),

    #[error("invalid config field '{field}': {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("non-finite value in term '{term}' (value = {value})")]
    NonFinite { term: String, value: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("invalid translation task: source and target domain are both {0}")]
    IdentityTask(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("volume file format error in '{path}': {reason}")]
    VolumeFormat { path: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn shape(expected: &[usize], got: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
            context: context.into(),
        }
    }

    /// Coarse classification used by the CLI for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig { .. }
            | Error::IdentityTask(_)
            | Error::DegenerateInput(_)
            | Error::MissingModality(_)
            | Error::NonBinaryMask { .. }
            | Error::InvalidNormRecord(_) => ErrorKind::Validation,
            Error::Io { .. } | Error::VolumeFormat { .. } => ErrorKind::Io,
            Error::ShapeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::CheckpointFormat(_) => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
    Io,
}

pub type Result<T> = std::result::Result<T, Error>;
