use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, indices or counts that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("empty batch")]
    EmptyBatch,

    /// An operation ran before the state it depends on was populated.
    #[error("state error: {0}")]
    State(String),

    #[error("format error in {path} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short tag naming the subsystem that raised the error, used by the CLI.
    pub fn module_tag(&self) -> &'static str {
        match self {
            Error::Structural(_) | Error::EmptyBatch => "structure",
            Error::Numerical(_) => "numerics",
            Error::State(_) => "state",
            Error::Format { .. } => "tasks",
            Error::Config { .. } => "cli",
            Error::Io { .. } => "io",
        }
    }
}
