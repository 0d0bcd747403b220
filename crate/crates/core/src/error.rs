use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor dimension did not match what the operation expects.
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("config error at `{node}`: {reason}")]
    Config { node: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint incompatible with graph: {0}")]
    Compatibility(String),

    #[error("missing weights for node `{0}`")]
    MissingWeights(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(node: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            node: node.into(),
            reason: reason.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Data(format!("{other:?}")),
        }
    }
}
