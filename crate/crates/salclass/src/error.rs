use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape does not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-side precondition was violated (bad index, empty set, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Statistics cannot be computed (constant map, single-element channel, ...).
    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    /// Invalid network or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or activation became NaN/Inf during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
