//! Token-usage accounting over manifest corpora and analytic cost proxies.
//!
//! Nothing here measures hardware. KV-cache bytes and prefill ratios are
//! closed-form estimates from token counts and model dimensions.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{read_selection_manifest, ManifestError, SelectionManifest};

#[derive(Debug, Error)]
#[error("{}: {source}", path.display())]
pub struct CorpusError {
    pub path: PathBuf,
    #[source]
    pub source: ManifestError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenUsageStats {
    pub sample_count: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub stddev: f64,
    pub budget: usize,
    /// Samples whose `total_kept` exceeds `budget`.
    pub violations: usize,
}

impl TokenUsageStats {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("stats serialize");
        text.push('\n');
        text
    }
}

impl fmt::Display for TokenUsageStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("samples", self.sample_count.to_string()),
            ("budget", self.budget.to_string()),
            ("min", self.min.to_string()),
            ("max", self.max.to_string()),
            ("mean", format!("{:.3}", self.mean)),
            ("stddev", format!("{:.3}", self.stddev)),
            ("violations", self.violations.to_string()),
        ];
        let width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        for (name, value) in rows {
            writeln!(f, "{name:<12}{value:>width$}")?;
        }
        Ok(())
    }
}

/// Statistics of `total_kept` across a corpus. Accumulation is in integers,
/// so the result does not depend on manifest order.
pub fn corpus_stats(manifests: &[SelectionManifest], budget: usize) -> TokenUsageStats {
    stats_from_counts(manifests.iter().map(|m| m.total_kept), budget)
}

pub fn stats_from_counts(
    counts: impl IntoIterator<Item = usize>,
    budget: usize,
) -> TokenUsageStats {
    let mut n: u128 = 0;
    let mut sum: u128 = 0;
    let mut sum_sq: u128 = 0;
    let mut min = usize::MAX;
    let mut max = 0;
    let mut violations = 0;
    for c in counts {
        n += 1;
        sum += c as u128;
        sum_sq += (c as u128) * (c as u128);
        min = min.min(c);
        max = max.max(c);
        if c > budget {
            violations += 1;
        }
    }
    if n == 0 {
        return TokenUsageStats {
            sample_count: 0,
            min: 0,
            max: 0,
            mean: 0.0,
            stddev: 0.0,
            budget,
            violations: 0,
        };
    }
    // n * sum_sq - sum^2 is n^2 times the population variance, exactly
    let spread = n * sum_sq - sum * sum;
    TokenUsageStats {
        sample_count: n as usize,
        min,
        max,
        mean: sum as f64 / n as f64,
        stddev: (spread as f64).sqrt() / n as f64,
        budget,
        violations,
    }
}

/// Reads every manifest, failing on the first unreadable one.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<SelectionManifest>, CorpusError> {
    paths
        .iter()
        .map(|p| {
            read_selection_manifest(p).map_err(|source| CorpusError {
                path: p.as_ref().to_path_buf(),
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub llm_layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_element: u64,
    /// System and text tokens assumed to accompany the visual tokens.
    pub extra_tokens: u64,
}

impl ModelProfile {
    /// 7B Vicuna-style decoder in fp16 (LLaVA-Next-7B).
    pub const VICUNA_7B_FP16: ModelProfile = ModelProfile {
        llm_layers: 32,
        kv_heads: 32,
        head_dim: 128,
        bytes_per_element: 2,
        extra_tokens: 0,
    };

    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.llm_layers * self.kv_heads * self.head_dim * self.bytes_per_element
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub kv_bytes: u64,
    /// Sequence length relative to the reference (no-drop) sequence.
    pub linear_ratio: f64,
    /// Squared length ratio, a proxy for prefill attention cost.
    pub quadratic_ratio: f64,
}

/// Cost proxies for a request carrying `visual_tokens`, relative to the same
/// request carrying `reference_tokens` (typically every token, undropped).
pub fn estimate_cost(
    visual_tokens: u64,
    reference_tokens: u64,
    profile: &ModelProfile,
) -> CostEstimate {
    let seq = visual_tokens + profile.extra_tokens;
    let reference = reference_tokens + profile.extra_tokens;
    let linear_ratio = if reference == 0 {
        1.0
    } else {
        seq as f64 / reference as f64
    };
    CostEstimate {
        kv_bytes: profile.kv_bytes_per_token() * seq,
        linear_ratio,
        quadratic_ratio: linear_ratio * linear_ratio,
    }
}
