use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape is empty")]
    EmptyTape,

    #[error("unknown variable #{0} on this tape")]
    UnknownVar(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm must be in inference mode for {0}")]
    TrainModeBatchNorm(&'static str),

    #[error("unsupported head layer: {0}")]
    UnsupportedLayer(String),

    #[error("head is already adapted to map inputs")]
    AlreadyAdapted,

    #[error("invariance verification failed: max deviation {max_abs_dev:e} > tolerance {tol:e}")]
    InvarianceFailed { max_abs_dev: f64, tol: f64 },

    #[error("non-finite value encountered in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("config: {path}: {reason}")]
    Config { path: String, reason: String },

    #[error("degenerate: {0}")]
    Degenerate(&'static str),
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
