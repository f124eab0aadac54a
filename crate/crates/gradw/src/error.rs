use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op} on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: output extent on axis {axis} is zero (input {input}, kernel {kernel}, stride {stride}, pad {pad})")]
    ZeroExtent {
        op: &'static str,
        axis: usize,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("tap node {0} was not registered on the tape before backward")]
    TapNotRegistered(usize),

    #[error("backward requires a scalar on the active tape: {0}")]
    NotAScalar(String),

    #[error("normalize_2d in batch/eval mode requires running statistics")]
    MissingRunningStats,

    #[error("parameter set is frozen: {0}")]
    Frozen(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown loss variant `{0}` (valid: grad_w, equal_w, clean_w, res_w, no_softmax, channel, residual, both)")]
    UnknownVariant(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; diagnostic dump: {dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
