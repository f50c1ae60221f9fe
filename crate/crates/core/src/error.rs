use thiserror::Error;

use crate::geometry::GeometryError;

/// Failures of the allocation and selection engine.
#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("layer {layer} ({role}) was not captured in the dump")]
    MissingLayer { layer: usize, role: &'static str },
    #[error("partition {0} does not exist")]
    UnknownPartition(usize),
    #[error("head {head} out of range for {heads} heads")]
    InvalidHead { head: usize, heads: usize },
    #[error("layout does not match dump: {0}")]
    LayoutMismatch(String),
    #[error("budget {budget} exceeds capacity {capacity}")]
    BudgetExceedsCapacity { budget: usize, capacity: usize },
    #[error("expected {expected} visual content scores, got {actual}")]
    ScoreCountMismatch { expected: usize, actual: usize },
    #[error("{field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
