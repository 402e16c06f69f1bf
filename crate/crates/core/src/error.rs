use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; build a fresh tape per pass")]
    AlreadyBackpropagated,

    #[error("tape node {node} references a later node {input}")]
    Cycle { node: usize, input: usize },

    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("corrupt rng state: {0}")]
    CorruptRngState(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty window")]
    EmptyWindow,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("parameter group `{0}` matches no parameters")]
    MissingParamGroup(String),

    #[error("model was configured without a class token")]
    NoClassToken,

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("string `{text}` does not fit a {width}x{height} canvas")]
    StringTooLong {
        text: String,
        width: usize,
        height: usize,
    },

    #[error("block covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("quadratic problem is not isotropic; the one-step bound is not tight")]
    NonIsotropicHessian,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("frozen parameters changed: {0}")]
    FreezeViolation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
