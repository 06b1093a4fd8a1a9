use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the crate. Each message is prefixed with the
/// module that produced it so CLI output can be traced back to its source.
#[derive(Debug, Error)]
pub enum Error {
    #[error("autodiff: shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{module}: index {index} out of range for {bound} classes")]
    Index {
        module: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{module}: contract violated: {message}")]
    Contract {
        module: &'static str,
        message: String,
    },

    #[error("{module}: format error in {path}:{line}: {message}")]
    Format {
        module: &'static str,
        path: String,
        line: usize,
        message: String,
    },

    #[error("data_io: invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("episode_sampler: split has {found} classes, at least {required} are needed")]
    SplitTooSmall { found: usize, required: usize },

    #[error("episode_sampler: class '{class}' has {size} examples, query shot would be 0")]
    ClassTooSmall { class: String, size: usize },

    #[error(
        "episode_sampler: class '{class}' needs {needed} examples but only {available} remain"
    )]
    ClassExhausted {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("encoder_model: empty utterance")]
    EmptyUtterance,

    #[error("gradcheck: {0}")]
    GradCheck(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data_io: malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn contract(module: &'static str, message: impl Into<String>) -> Self {
        Error::Contract {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 2 for I/O failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
