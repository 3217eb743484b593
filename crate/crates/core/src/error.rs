use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("duplicate primitive `{0}`")]
    DuplicatePrimitive(String),
    #[error("empty primitive name")]
    EmptyPrimitive,
    #[error("duplicate composition ({0}, {1})")]
    DuplicatePair(String, String),
    #[error("seen composition ({0}, {1}) is not in the target set")]
    SeenNotInTarget(String, String),
    #[error("primitive `{0}` does not occur in any seen composition")]
    UncoveredPrimitive(String),
    #[error("closed-world space requires an explicit target set")]
    MissingTarget,
    #[error("composition ({0}, {1}) is not in the target set")]
    NotInTarget(String, String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cosine of a zero-norm vector")]
    ZeroVector,
    #[error("mask leaves no admissible composition")]
    EmptyMask,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch for `{0}`")]
    ShapeMismatch(String),
    #[error("score matrix needs both seen and unseen compositions")]
    DegenerateSpace,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible generator configuration: {0}")]
    InfeasibleConfig(String),

    #[error("dataset failed validation: {0}")]
    Validation(String),
    #[error("{path}: parse error at {position}: {message}")]
    Parse {
        path: PathBuf,
        position: String,
        message: String,
    },
    #[error("token `{0}` missing from embedding file")]
    MissingToken(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        position: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            position: position.into(),
            message: message.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by the filesystem or by malformed files.
    pub fn is_io_or_parse(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => true,
            Error::Context { source, .. } => source.is_io_or_parse(),
            _ => false,
        }
    }
}
