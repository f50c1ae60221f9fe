//! Per-partition token dropping and the end-to-end two-phase run.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::allocator::{allocate_budget, visual_content_scores, BudgetPlan, VisualContentScores};
use crate::config::{Aggregation, EngineConfig};
use crate::error::EngineError;
use crate::geometry::PartitionLayout;
use crate::tensor_io::AttentionDump;

/// Per-token importance of one partition, from final-layer CLS attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance(pub Vec<f32>);

impl FeatureImportance {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSelection {
    pub partition_id: usize,
    pub allocated: usize,
    /// Kept token indices in ascending (raster) order.
    pub kept_indices: Vec<usize>,
    pub importance: Option<FeatureImportance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub partitions: Vec<PartitionSelection>,
    pub total_kept: usize,
}

impl SelectionResult {
    /// Drops the per-token importance scores.
    pub fn without_importance(mut self) -> Self {
        for p in &mut self.partitions {
            p.importance = None;
        }
        self
    }
}

pub fn feature_importance(
    dump: &AttentionDump,
    partition_id: usize,
    final_layer: usize,
    aggregation: Aggregation,
) -> Result<FeatureImportance, EngineError> {
    let slot = dump
        .layer_slot(final_layer)
        .ok_or(EngineError::MissingLayer {
            layer: final_layer,
            role: "final",
        })?;
    aggregation.check_heads(dump.num_heads())?;
    let tensor = &dump
        .partition(partition_id)
        .ok_or(EngineError::UnknownPartition(partition_id))?
        .tensor;
    Ok(FeatureImportance(
        (0..dump.tokens_per_partition())
            .map(|j| aggregation.combine(tensor, slot, j))
            .collect(),
    ))
}

/// Indices of the `n` most important tokens, ties going to the lower index,
/// returned in ascending order.
pub fn select_tokens(importance: &FeatureImportance, n: usize) -> Vec<usize> {
    let f = importance.as_slice();
    if n >= f.len() {
        return (0..f.len()).collect();
    }
    if n == 0 {
        return Vec::new();
    }
    let rank = |&a: &usize, &b: &usize| {
        f[b].partial_cmp(&f[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    let mut order: Vec<usize> = (0..f.len()).collect();
    order.select_nth_unstable_by(n - 1, rank);
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Runs both phases: budget allocation from the full image's initial-layer
/// attention, then top-k selection per partition from final-layer attention.
pub fn run_hired(
    dump: &AttentionDump,
    layout: &PartitionLayout,
    config: &EngineConfig,
) -> Result<(BudgetPlan, SelectionResult), EngineError> {
    config.validate()?;
    let k = dump.k();
    let tokens = dump.tokens_per_partition();
    if layout.k() != k || layout.tokens_per_partition() != tokens {
        return Err(EngineError::LayoutMismatch(format!(
            "layout has k={} with {} tokens, dump has k={} with {} tokens",
            layout.k(),
            layout.tokens_per_partition(),
            k,
            tokens
        )));
    }
    for (layer, role) in [(config.init_layer, "init"), (config.final_layer, "final")] {
        if dump.layer_slot(layer).is_none() {
            return Err(EngineError::MissingLayer { layer, role });
        }
    }

    let budget = config.budget.resolve(k, tokens);
    let scores = if k > 0 {
        visual_content_scores(dump, layout, config.init_layer, config.aggregation)?
    } else {
        VisualContentScores::default()
    };
    let plan = allocate_budget(
        &scores,
        budget,
        config.alpha,
        tokens,
        k,
        config.distribution,
    )?;

    let partitions = plan
        .allocations()
        .enumerate()
        .map(|(id, allocated)| {
            let importance = feature_importance(dump, id, config.final_layer, config.aggregation)?;
            Ok(PartitionSelection {
                partition_id: id,
                allocated,
                kept_indices: select_tokens(&importance, allocated),
                importance: Some(importance),
            })
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    let total_kept = partitions.iter().map(|p| p.kept_indices.len()).sum();
    Ok((
        plan,
        SelectionResult {
            partitions,
            total_kept,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Budget;
    use crate::tensor_io::generate_synthetic_dump;

    fn fi(v: &[f32]) -> FeatureImportance {
        FeatureImportance(v.to_vec())
    }

    #[test]
    fn top_k_basics() {
        assert_eq!(select_tokens(&fi(&[0.1, 0.4, 0.4, 0.05]), 2), vec![1, 2]);
        assert_eq!(select_tokens(&fi(&[0.25; 4]), 2), vec![0, 1]);
        assert_eq!(select_tokens(&fi(&[0.3, 0.1]), 0), Vec::<usize>::new());
        assert_eq!(select_tokens(&fi(&[0.3, 0.1]), 5), vec![0, 1]);
        assert_eq!(select_tokens(&fi(&[0.1, 0.2, 0.3, 0.2]), 2), vec![1, 2]);
    }

    #[test]
    fn importance_sums_heads() {
        let dump = generate_synthetic_dump(5, 1, 2, 4, &[0, 22]).unwrap();
        let f = feature_importance(&dump, 1, 22, Aggregation::Sum).unwrap();
        let t = &dump.partition(1).unwrap().tensor;
        for j in 0..4 {
            assert_eq!(f.0[j], t.row(1, 0)[j] + t.row(1, 1)[j]);
        }
        assert_eq!(
            feature_importance(&dump, 2, 22, Aggregation::Sum),
            Err(EngineError::UnknownPartition(2))
        );
        assert!(matches!(
            feature_importance(&dump, 0, 11, Aggregation::Sum),
            Err(EngineError::MissingLayer { layer: 11, .. })
        ));
    }

    #[test]
    fn single_head_is_identity() {
        let dump = generate_synthetic_dump(5, 0, 1, 9, &[22]).unwrap();
        let f = feature_importance(&dump, 0, 22, Aggregation::Sum).unwrap();
        assert_eq!(f.0.as_slice(), dump.partition(0).unwrap().tensor.row(0, 0));
    }

    #[test]
    fn low_resolution_run() {
        let dump = generate_synthetic_dump(1, 0, 4, 576, &[0, 22]).unwrap();
        let cfg = EngineConfig::with_budget(Budget::Fraction(0.2));
        let (plan, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
        assert_eq!(plan.n_full, 115);
        assert_eq!(result.partitions.len(), 1);
        assert_eq!(result.total_kept, 115);
    }

    #[test]
    fn full_budget_keeps_everything() {
        let dump = generate_synthetic_dump(2, 4, 2, 16, &[0, 22]).unwrap();
        let cfg = EngineConfig::with_budget(Budget::Fraction(1.0));
        let (_, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
        assert_eq!(result.total_kept, 80);
        for p in &result.partitions {
            assert_eq!(p.kept_indices, (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_missing_final_layer() {
        let dump = generate_synthetic_dump(2, 1, 2, 16, &[0, 11]).unwrap();
        let cfg = EngineConfig::default();
        assert_eq!(
            run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap_err(),
            EngineError::MissingLayer {
                layer: 22,
                role: "final"
            }
        );
    }
}
