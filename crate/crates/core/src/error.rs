use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("unknown parameter path `{0}`")]
    UnknownParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("dilation must be at least 1, got {0}")]
    InvalidDilation(usize),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("edge set is empty")]
    EmptyEdgeSet,
    #[error("role list has no hand slot")]
    NoHand,
    #[error("role list has no object slot")]
    NoObject,
    #[error("slot {0} is not an object slot")]
    NotAnObject(usize),
    #[error("head index {index} out of range (configured {max})")]
    HeadOutOfRange { index: usize, max: usize },
    #[error("component count mismatch: {0}")]
    ComponentMismatch(String),
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("empty target class list")]
    EmptyTargets,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible class construction: {0}")]
    Infeasible(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("class count mismatch: checkpoint has {checkpoint}, manifest needs {manifest}")]
    ClassCountMismatch { checkpoint: usize, manifest: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
