use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}, field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },

    #[error("label `{value}` is not in the {scheme} scheme")]
    UnknownLabel { scheme: String, value: String },

    #[error("duplicate claim id `{0}`")]
    DuplicateClaim(String),

    #[error("unknown split `{0}`")]
    UnknownSplit(String),

    #[error("zero-norm vector for `{item}`")]
    ZeroNorm { item: String },

    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("vector `{key}` is not unit-normalized (norm {norm})")]
    NotNormalized { key: String, norm: f64 },

    #[error("duplicate index key `{0}`")]
    DuplicateKey(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("provider unreachable at {endpoint}: {message}")]
    ProviderUnreachable { endpoint: String, message: String },

    #[error("provider protocol error: {0}")]
    Provider(String),

    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("bad {what} file: {message}")]
    Format { what: &'static str, message: String },

    #[error("truncated {0} file")]
    Truncated(&'static str),

    #[error("checksum mismatch in {0} file")]
    Checksum(&'static str),

    #[error("class `{0}` has no training examples")]
    MissingClass(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (step {step})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        step: usize,
    },

    #[error("length mismatch: {left} gold labels vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Whether retrying the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::ProviderUnreachable { .. })
    }

    /// Process exit code: 1 validation, 2 stage failure, 3 provider unreachable.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => match source.exit_code() {
                3 => 3,
                _ => 2,
            },
            Error::ProviderUnreachable { .. } => 3,
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
