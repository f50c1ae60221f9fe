//! Token budget allocation across the full image and its sub-images.
//!
//! The full image receives `floor(alpha * budget)` tokens. The remainder is
//! split across sub-images in proportion to their visual content score, the
//! initial-layer CLS attention of the full image summed over the tokens each
//! sub-image covers. Integer budgets come from largest-remainder
//! apportionment, computed in exact integer arithmetic so the result depends
//! only on the score ratios.

use num_bigint::BigUint;
use num_traits::float::FloatCore;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::config::{snap_floor, Aggregation, Distribution};
use crate::error::EngineError;
use crate::geometry::PartitionLayout;
use crate::tensor_io::AttentionDump;

/// Visual content score per sub-image; index `i` belongs to partition `i + 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VisualContentScores(pub Vec<f32>);

impl VisualContentScores {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Absolute budget the plan was made for.
    pub budget: usize,
    pub n_full: usize,
    /// Budget handed to the sub-images before any clamping.
    pub n_sub_total: usize,
    pub n_sub: Vec<usize>,
    pub scores: VisualContentScores,
    /// Per partition (full image first): whether its share hit the
    /// per-partition token count.
    pub clamped: Vec<bool>,
    /// Tokens that could not be placed because every partition is full.
    pub unallocated: usize,
}

impl BudgetPlan {
    pub fn k(&self) -> usize {
        self.n_sub.len()
    }

    /// Budget of partition `id` (0 is the full image).
    pub fn allocation(&self, id: usize) -> Option<usize> {
        if id == 0 {
            Some(self.n_full)
        } else {
            self.n_sub.get(id - 1).copied()
        }
    }

    pub fn allocations(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.n_full).chain(self.n_sub.iter().copied())
    }

    pub fn total(&self) -> usize {
        self.n_full + self.n_sub.iter().sum::<usize>()
    }
}

/// Scores each sub-image by the full image's attention at `init_layer` over
/// the tokens it covers. Heads are combined per token (ascending head order),
/// then tokens are accumulated in ascending index order.
pub fn visual_content_scores(
    dump: &AttentionDump,
    layout: &PartitionLayout,
    init_layer: usize,
    aggregation: Aggregation,
) -> Result<VisualContentScores, EngineError> {
    let slot = dump
        .layer_slot(init_layer)
        .ok_or(EngineError::MissingLayer {
            layer: init_layer,
            role: "init",
        })?;
    aggregation.check_heads(dump.num_heads())?;
    if layout.tokens_per_partition() != dump.tokens_per_partition() {
        return Err(EngineError::LayoutMismatch(format!(
            "layout has {} tokens per partition, dump has {}",
            layout.tokens_per_partition(),
            dump.tokens_per_partition()
        )));
    }
    let full = &dump
        .partition(0)
        .ok_or(EngineError::UnknownPartition(0))?
        .tensor;
    let scores = layout
        .token_index_sets
        .iter()
        .map(|tokens| {
            tokens
                .iter()
                .fold(0f32, |acc, &j| acc + aggregation.combine(full, slot, j))
        })
        .collect();
    Ok(VisualContentScores(scores))
}

/// Exact integer weights proportional to the (nonnegative, finite) scores.
fn exact_weights(scores: &[f32]) -> Vec<BigUint> {
    let parts: Vec<(u64, i16)> = scores
        .iter()
        .map(|&s| {
            let (mantissa, exponent, _) = s.integer_decode();
            (mantissa, exponent)
        })
        .collect();
    let min_exp = parts
        .iter()
        .filter(|(m, _)| *m != 0)
        .map(|&(_, e)| e)
        .min()
        .unwrap_or(0);
    parts
        .into_iter()
        .map(|(m, e)| {
            if m == 0 {
                BigUint::zero()
            } else {
                BigUint::from(m) << (e - min_exp) as usize
            }
        })
        .collect()
}

/// Largest-remainder apportionment of `total` by `weights`: every entry gets
/// the floor of its exact share, leftovers go to the largest remainders with
/// ties resolved towards the lower index. `weights` must not all be zero.
pub(crate) fn apportion(total: usize, weights: &[BigUint]) -> Vec<usize> {
    let sum: BigUint = weights.iter().sum();
    debug_assert!(!sum.is_zero());
    let total_big = BigUint::from(total);
    let mut alloc = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    for w in weights {
        let scaled = &total_big * w;
        alloc.push((&scaled / &sum).to_usize().expect("share fits in usize"));
        remainders.push(scaled % &sum);
    }
    let leftover = total - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().take(leftover) {
        alloc[i] += 1;
    }
    alloc
}

/// Apportions `total` with each entry capped at `cap`. Capped entries are
/// fixed and the rest re-apportioned over the uncapped ones until nothing
/// exceeds the cap. Returns the allocation, the capped flags and any surplus
/// left once every entry is full.
fn apportion_capped(
    total: usize,
    weights: &[BigUint],
    cap: usize,
) -> (Vec<usize>, Vec<bool>, usize) {
    let n = weights.len();
    let mut alloc = vec![0; n];
    let mut capped = vec![false; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut remaining = total;
    while !active.is_empty() {
        let mut sub: Vec<BigUint> = active.iter().map(|&i| weights[i].clone()).collect();
        if sub.iter().all(Zero::is_zero) {
            sub = vec![BigUint::from(1u8); active.len()];
        }
        let shares = apportion(remaining, &sub);
        let over: Vec<usize> = active
            .iter()
            .zip(&shares)
            .filter(|(_, &s)| s > cap)
            .map(|(&i, _)| i)
            .collect();
        if over.is_empty() {
            for (&i, &s) in active.iter().zip(&shares) {
                alloc[i] = s;
            }
            return (alloc, capped, 0);
        }
        for &i in &over {
            alloc[i] = cap;
            capped[i] = true;
            remaining -= cap;
        }
        active.retain(|i| !capped[*i]);
    }
    (alloc, capped, remaining)
}

/// Splits `budget` tokens between the full image and `k` sub-images of
/// `tokens` tokens each.
///
/// Shares above `tokens` are clamped and re-apportioned; sub-image budget that
/// cannot be placed flows back to the full image while it has room.
pub fn allocate_budget(
    scores: &VisualContentScores,
    budget: usize,
    alpha: f64,
    tokens: usize,
    k: usize,
    distribution: Distribution,
) -> Result<BudgetPlan, EngineError> {
    let capacity = (k + 1) * tokens;
    if budget > capacity {
        return Err(EngineError::BudgetExceedsCapacity { budget, capacity });
    }
    if scores.len() != k {
        return Err(EngineError::ScoreCountMismatch {
            expected: k,
            actual: scores.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EngineError::InvalidConfig {
            field: "alpha",
            reason: format!("must lie in [0, 1], got {alpha}"),
        });
    }
    if let Some(s) = scores.0.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(EngineError::InvalidConfig {
            field: "scores",
            reason: format!("scores must be finite and nonnegative, got {s}"),
        });
    }

    if k == 0 {
        let n_full = budget.min(tokens);
        return Ok(BudgetPlan {
            budget,
            n_full,
            n_sub_total: 0,
            n_sub: Vec::new(),
            scores: scores.clone(),
            clamped: vec![budget > tokens],
            unallocated: budget - n_full,
        });
    }

    let full_share = snap_floor(alpha * budget as f64);
    let mut n_full = full_share.min(tokens);
    let n_sub_total = budget - n_full;

    let weights = match distribution {
        Distribution::ContentScored => exact_weights(&scores.0),
        Distribution::Even => vec![BigUint::from(1u8); k],
    };
    // all-zero weights fall back to an even split inside apportion_capped
    let (n_sub, sub_capped, surplus) = apportion_capped(n_sub_total, &weights, tokens);

    let spill = surplus.min(tokens - n_full);
    n_full += spill;

    let mut clamped = Vec::with_capacity(k + 1);
    clamped.push(full_share > tokens);
    clamped.extend(sub_capped);
    Ok(BudgetPlan {
        budget,
        n_full,
        n_sub_total,
        n_sub,
        scores: scores.clone(),
        clamped,
        unallocated: surplus - spill,
    })
}
