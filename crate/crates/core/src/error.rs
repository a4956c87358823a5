use std::path::PathBuf;

/// Errors raised by the numeric core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{what}: malformed input at byte offset {offset}: {msg}")]
    Parse { what: String, offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {quantity} = {value}")]
    Diverged {
        epoch: usize,
        batch: usize,
        quantity: &'static str,
        value: f64,
    },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
