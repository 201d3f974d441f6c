use alloc::string::String;

/// Errors raised by the solver core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate interval: start {from} must be greater than end {to}")]
    DegenerateInterval { from: f64, to: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("branch count mismatch: expected {expected}, got {got}")]
    BranchCountMismatch { expected: usize, got: usize },

    #[error("simplex violation at step {step}: weights sum to {sum}")]
    Simplex { step: usize, sum: f64 },

    #[error("evaluation {index} failed: {message}")]
    EvalFailed { index: usize, message: String },

    #[error("non-finite loss at node {node}")]
    NonFiniteLoss { node: usize },

    #[error("training diverged at iteration {iteration}, node {node}: loss {loss}")]
    Diverged {
        iteration: usize,
        node: usize,
        loss: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mismatched trajectories: {0}")]
    Mismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;
