//! Fixed-budget visual token dropping for high-resolution vision-language
//! models.
//!
//! A high-resolution image is encoded as a downsampled full image plus `k`
//! sub-images. Given the ViT's CLS-attention for every partition, the engine
//! first splits a token budget across partitions ([`allocator`]) and then
//! keeps the most important tokens of each partition ([`selector`]).

pub mod allocator;
pub mod cli;
pub mod config;
pub mod efficiency;
mod error;
pub mod geometry;
pub mod selector;
pub mod tensor_io;

pub use allocator::{allocate_budget, visual_content_scores, BudgetPlan, VisualContentScores};
pub use config::{Aggregation, Budget, Distribution, EngineConfig};
pub use error::EngineError;
pub use geometry::{map_subimage_tokens, plan_partitions, Grid, PartitionLayout};
pub use selector::{
    feature_importance, run_hired, select_tokens, FeatureImportance, PartitionSelection,
    SelectionResult,
};
pub use tensor_io::{AttentionDump, DumpMeta, Tensor3};

/// Engine version, shared by the CLI's `--version`.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
