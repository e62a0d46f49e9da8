use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("empty batch")]
    EmptyBatch,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("strong convexity requires positive regularization")]
    NonPositiveRegularization,

    #[error("operation requires a convex model, {0} is non-convex")]
    NonConvex(&'static str),

    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),

    #[error("step size violates contraction at step {step}: factor {factor}")]
    StepSizeViolation { step: usize, factor: f64 },

    #[error("step size {eta0} exceeds admissible maximum {max}")]
    StepSizeTooLarge { eta0: f64, max: f64 },

    #[error("power iteration start vector vanished after reseeding")]
    DegenerateStart,

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("negative cost component `{0}`")]
    NegativeComponent(&'static str),

    #[error("no workers for batch {0}")]
    NoWorkers(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
