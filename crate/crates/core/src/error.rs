use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum OplError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("induced chain is not irreducible")]
    NotIrreducible,

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("state-action pair ({state}, {action}) has zero data coverage")]
    ZeroCoverage { state: usize, action: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("non-finite numerical result: {0}")]
    Numerical(String),

    #[error("ratio normalizer is degenerate (mean {mean:e}, max |e| {max_abs:e})")]
    DegenerateRatio { mean: f64, max_abs: f64 },

    #[error("zero denominator in the doubly robust estimate")]
    ZeroDenominator,

    #[error("objective undefined at this policy: {0}")]
    ObjectiveUndefined(String),

    #[error("analytic gradient disagrees with finite differences (max rel. error {max_rel_err:e})")]
    GradientMismatch { max_rel_err: f64 },

    #[error("all {0} optimizer starts failed")]
    AllStartsFailed(usize),

    #[error("fold {fold} has {size} trajectories, need at least 2")]
    FoldTooSmall { fold: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, OplError>;
