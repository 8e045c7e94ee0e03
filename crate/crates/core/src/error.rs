use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward needs a scalar output, node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("input `{0}` was not fed")]
    MissingInput(String),
    #[error("tape has not been evaluated; call forward first")]
    NotEvaluated,
    #[error("the target distribution of a divergence must be detached")]
    AttachedTarget,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input dimension {dim} exceeds the oracle guard of {max}")]
    DimensionGuard { dim: usize, max: usize },
    #[error("eigensolver did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("dataset: {0}")]
    Data(String),
}
