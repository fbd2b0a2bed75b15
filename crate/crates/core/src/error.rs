use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported weight file version {found:?} (expected {expected:?})")]
    UnsupportedVersion { expected: String, found: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error(
        "truncated data region: tensor {name:?} needs bytes up to {needed}, file has {available}"
    )]
    Truncated {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }
}
