//! Engine configuration: budget, allocation ratio, layer choices and head
//! aggregation.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::EngineError;
use crate::tensor_io::Tensor3;

/// Model layer whose full-image attention drives budget allocation.
pub const DEFAULT_INIT_LAYER: usize = 0;
/// Model layer whose attention ranks tokens for dropping (penultimate block of
/// a 24-layer CLIP ViT).
pub const DEFAULT_FINAL_LAYER: usize = 22;
/// Share of the budget reserved for the full image.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Floors `x`, treating values within a few ulps below an integer as that
/// integer so that e.g. `0.1 * 2880` yields 288.
pub(crate) fn snap_floor(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// Visual token budget, either an absolute count or a share of all
/// `(k + 1) * N_ViT` tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Tokens(usize),
    Fraction(f64),
}

impl Budget {
    /// Interprets a numeric budget: values in `(0, 1]` are fractions (so 1
    /// means full capacity), 0 and integers above 1 are token counts.
    pub fn from_value(v: f64) -> Result<Self, String> {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("budget must be a nonnegative number, got {v}"));
        }
        if v == 0.0 {
            Ok(Budget::Tokens(0))
        } else if v <= 1.0 {
            Ok(Budget::Fraction(v))
        } else if v.fract() == 0.0 && v <= usize::MAX as f64 {
            Ok(Budget::Tokens(v as usize))
        } else {
            Err(format!(
                "budget {v} is neither a fraction in (0, 1] nor a whole token count"
            ))
        }
    }

    /// Absolute budget for `k` sub-images of `tokens` tokens each, clamped to
    /// the total token count.
    pub fn resolve(self, k: usize, tokens: usize) -> usize {
        let capacity = (k + 1) * tokens;
        match self {
            Budget::Tokens(n) => n.min(capacity),
            Budget::Fraction(f) => snap_floor(f * capacity as f64).min(capacity),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| format!("'{s}' is not a number"))?;
        Budget::from_value(v)
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Tokens(n) => write!(f, "{n}"),
            Budget::Fraction(x) => write!(f, "{x}"),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            Budget::Tokens(n) => s.serialize_u64(n as u64),
            Budget::Fraction(x) => s.serialize_f64(x),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Budget::from_value(v).map_err(de::Error::custom)
    }
}

/// How per-head attention values for one token are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    Max,
    Head(usize),
}

impl Aggregation {
    /// Combines the heads of `tensor` at layer slot `slot` for token `token`,
    /// visiting heads in ascending order.
    pub fn combine(self, tensor: &Tensor3, slot: usize, token: usize) -> f32 {
        let heads = tensor.shape()[1];
        let at = |h: usize| tensor.row(slot, h)[token];
        match self {
            Aggregation::Sum => (0..heads).fold(0.0, |acc, h| acc + at(h)),
            Aggregation::Mean => (0..heads).fold(0.0, |acc, h| acc + at(h)) / heads as f32,
            Aggregation::Max => (0..heads).fold(0.0, |acc: f32, h| acc.max(at(h))),
            Aggregation::Head(h) => at(h),
        }
    }

    pub fn check_heads(self, heads: usize) -> Result<(), EngineError> {
        match self {
            Aggregation::Head(head) if head >= heads => {
                Err(EngineError::InvalidHead { head, heads })
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Sum => f.write_str("sum"),
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Max => f.write_str("max"),
            Aggregation::Head(h) => write!(f, "head:{h}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            _ => s
                .strip_prefix("head:")
                .and_then(|h| h.parse().ok())
                .map(Aggregation::Head)
                .ok_or_else(|| format!("expected sum, mean, max or head:N, got '{s}'")),
        }
    }
}

impl Serialize for Aggregation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// How the sub-image budget is split across sub-images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Distribution {
    /// Proportional to the visual content score of each sub-image.
    #[default]
    #[serde(rename = "content")]
    ContentScored,
    #[serde(rename = "even")]
    Even,
}

impl FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "content" => Ok(Distribution::ContentScored),
            "even" => Ok(Distribution::Even),
            _ => Err(format!("expected content or even, got '{s}'")),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::ContentScored => "content",
            Distribution::Even => "even",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub budget: Budget,
    pub alpha: f64,
    pub init_layer: usize,
    pub final_layer: usize,
    pub aggregation: Aggregation,
    pub distribution: Distribution,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Fraction(0.2),
            alpha: DEFAULT_ALPHA,
            init_layer: DEFAULT_INIT_LAYER,
            final_layer: DEFAULT_FINAL_LAYER,
            aggregation: Aggregation::Sum,
            distribution: Distribution::ContentScored,
        }
    }
}

impl EngineConfig {
    pub fn with_budget(budget: Budget) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EngineError::InvalidConfig {
                field: "alpha",
                reason: format!("must lie in [0, 1], got {}", self.alpha),
            });
        }
        if let Budget::Fraction(f) = self.budget {
            if !(f > 0.0 && f <= 1.0) {
                return Err(EngineError::InvalidConfig {
                    field: "budget",
                    reason: format!("fraction must lie in (0, 1], got {f}"),
                });
            }
        }
        Ok(())
    }
}
