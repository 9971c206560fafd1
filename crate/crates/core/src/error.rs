use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a tensor that was not recorded with gradient tracking")]
    NotTaped,

    #[error("render backward requested before a forward pass")]
    BackwardWithoutForward,

    #[error("{what}: expected {expected} coefficients, got {got}")]
    CoefficientMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite blended transform at seed {seed}")]
    NonFiniteTransform { seed: usize },

    #[error("missing region labels: {0}")]
    MissingRegions(String),

    #[error("unknown component label `{0}`")]
    UnknownLabel(String),

    #[error("missing render for component {0}")]
    MissingRender(String),

    #[error("t = {0} is outside [0, 1]")]
    TimeOutOfRange(f32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {msg}")]
    Asset { path: PathBuf, msg: String },

    #[error("image decode failed for {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn asset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Asset {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
