//! Selection manifests: the JSON record of which tokens a run kept.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::BudgetPlan;
use crate::config::{Aggregation, EngineConfig};
use crate::selector::{FeatureImportance, PartitionSelection, SelectionResult};

pub const SELECTION_MANIFEST_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid selection manifest: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Field order here is the order keys are written in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub version: u64,
    pub budget: usize,
    pub alpha: f64,
    pub init_layer: usize,
    pub final_layer: usize,
    pub aggregation: Aggregation,
    pub partitions: Vec<PartitionRecord>,
    pub total_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub id: usize,
    pub allocated: usize,
    pub kept_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<f32>>,
}

impl SelectionManifest {
    pub fn new(result: &SelectionResult, plan: &BudgetPlan, config: &EngineConfig) -> Self {
        Self {
            version: SELECTION_MANIFEST_VERSION,
            budget: plan.budget,
            alpha: config.alpha,
            init_layer: config.init_layer,
            final_layer: config.final_layer,
            aggregation: config.aggregation,
            partitions: result
                .partitions
                .iter()
                .map(|p| PartitionRecord {
                    id: p.partition_id,
                    allocated: p.allocated,
                    kept_indices: p.kept_indices.clone(),
                    importance: p.importance.as_ref().map(|f| f.0.clone()),
                })
                .collect(),
            total_kept: result.total_kept,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Rebuilds the selection this manifest records.
    pub fn selection(&self) -> SelectionResult {
        SelectionResult {
            partitions: self
                .partitions
                .iter()
                .map(|p| PartitionSelection {
                    partition_id: p.id,
                    allocated: p.allocated,
                    kept_indices: p.kept_indices.clone(),
                    importance: p.importance.clone().map(FeatureImportance),
                })
                .collect(),
            total_kept: self.total_kept,
        }
    }
}

pub fn write_selection_manifest(
    result: &SelectionResult,
    plan: &BudgetPlan,
    config: &EngineConfig,
    path: impl AsRef<Path>,
) -> Result<(), ManifestError> {
    fs::write(path, SelectionManifest::new(result, plan, config).to_json())?;
    Ok(())
}

pub fn read_selection_manifest(path: impl AsRef<Path>) -> Result<SelectionManifest, ManifestError> {
    SelectionManifest::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Budget;
    use crate::selector::run_hired;
    use crate::tensor_io::generate_synthetic_dump;

    #[test]
    fn keys_in_fixed_order() {
        let dump = generate_synthetic_dump(1, 1, 1, 4, &[0, 22]).unwrap();
        let cfg = EngineConfig::with_budget(Budget::Tokens(3));
        let (plan, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
        let json = SelectionManifest::new(&result.without_importance(), &plan, &cfg).to_json();
        let keys = [
            "\"version\"",
            "\"budget\"",
            "\"alpha\"",
            "\"init_layer\"",
            "\"final_layer\"",
            "\"aggregation\"",
            "\"partitions\"",
            "\"total_kept\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
        assert!(!json.contains("importance"));
    }

    #[test]
    fn zero_budget_manifest() {
        let dump = generate_synthetic_dump(1, 4, 2, 16, &[0, 22]).unwrap();
        let cfg = EngineConfig::with_budget(Budget::Tokens(0));
        let (plan, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
        let m = SelectionManifest::new(&result, &plan, &cfg);
        assert_eq!(m.total_kept, 0);
        assert!(m.partitions.iter().all(|p| p.kept_indices.is_empty()));
        assert_eq!(m.partitions.len(), 5);
    }

    #[test]
    fn ignores_unknown_keys() {
        let text = r#"{"version": 1, "budget": 2, "alpha": 0.5, "init_layer": 0,
            "final_layer": 22, "aggregation": "sum", "producer": "x",
            "partitions": [{"id": 0, "allocated": 2, "kept_indices": [0, 3], "note": 1}],
            "total_kept": 2}"#;
        let m = SelectionManifest::from_json(text).unwrap();
        assert_eq!(m.partitions[0].kept_indices, vec![0, 3]);
    }
}
