//! Independent reference implementations used as test oracles. Nothing here
//! calls into the engine's allocation or selection code.

#![allow(dead_code)]

use hired::{AttentionDump, DumpMeta, Grid, Tensor3};
use rand::Rng;

/// Tokens of sub-image `i` (1-based) computed directly from floating-point
/// patch centres.
pub fn oracle_tokens(grid: Grid, patch: Grid, i: usize) -> Vec<usize> {
    let row = (i - 1) / grid.w;
    let col = (i - 1) % grid.w;
    let mut out = Vec::new();
    for r in 0..patch.h {
        for c in 0..patch.w {
            let cx = (c as f64 + 0.5) / patch.w as f64;
            let cy = (r as f64 + 0.5) / patch.h as f64;
            let gc = ((cx * grid.w as f64).floor() as usize).min(grid.w - 1);
            let gr = ((cy * grid.h as f64).floor() as usize).min(grid.h - 1);
            if gc == col && gr == row {
                out.push(r * patch.w + c);
            }
        }
    }
    out
}

/// Stable sort by descending importance, take `n`, restore raster order.
pub fn oracle_top_k(f: &[f32], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.len()).collect();
    idx.sort_by(|&a, &b| f[b].partial_cmp(&f[a]).unwrap());
    idx.truncate(n);
    idx.sort();
    idx
}

fn floor_snap(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Floor shares plus one token each for the largest fractional remainders,
/// ties to the lower index, in plain floating point.
pub fn oracle_largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = shares.iter().map(|e| e.floor() as usize).collect();
    let left = total - out.iter().sum::<usize>();
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for &i in idx.iter().take(left) {
        out[i] += 1;
    }
    out
}

/// Clamped apportionment: fix anything above `cap`, re-split the rest.
pub fn oracle_capped(total: usize, weights: &[f64], cap: usize) -> (Vec<usize>, usize) {
    let mut out = vec![0; weights.len()];
    let mut fixed = vec![false; weights.len()];
    let mut remaining = total;
    loop {
        let free: Vec<usize> = (0..weights.len()).filter(|&i| !fixed[i]).collect();
        if free.is_empty() {
            return (out, remaining);
        }
        let mut w: Vec<f64> = free.iter().map(|&i| weights[i]).collect();
        if w.iter().sum::<f64>() == 0.0 {
            w = vec![1.0; free.len()];
        }
        let shares = oracle_largest_remainder(remaining, &w);
        let mut any = false;
        for (&i, &s) in free.iter().zip(&shares) {
            if s > cap {
                fixed[i] = true;
                out[i] = cap;
                remaining -= cap;
                any = true;
            }
        }
        if !any {
            for (&i, &s) in free.iter().zip(&shares) {
                out[i] = s;
            }
            return (out, 0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub budgets: Vec<usize>,
    pub kept: Vec<Vec<usize>>,
}

/// Both phases written out straight: summed-head scores, proportional split,
/// sort-based top-k.
pub fn oracle_alg1(
    dump: &AttentionDump,
    budget: usize,
    alpha: f64,
    init_layer: usize,
    final_layer: usize,
) -> OracleRun {
    let meta = dump.meta();
    let n_vit = meta.patch_grid.area();
    let k = meta.grid.map_or(0, |g| g.area());
    let init = meta
        .layers_captured
        .iter()
        .position(|&l| l == init_layer)
        .unwrap();
    let fin = meta
        .layers_captured
        .iter()
        .position(|&l| l == final_layer)
        .unwrap();
    let heads = meta.num_heads;
    let attn = |p: usize, slot: usize, h: usize, j: usize| -> f32 {
        dump.partitions()[p].tensor.data()[(slot * heads + h) * n_vit + j]
    };

    let mut budgets = Vec::with_capacity(k + 1);
    if k == 0 {
        budgets.push(budget.min(n_vit));
    } else {
        let grid = meta.grid.unwrap();
        let mut n_full = floor_snap(alpha * budget as f64).min(n_vit);
        let n_sub = budget - n_full;
        let scores: Vec<f64> = (1..=k)
            .map(|i| {
                let mut s = 0f32;
                for j in oracle_tokens(grid, meta.patch_grid, i) {
                    let mut per_token = 0f32;
                    for h in 0..heads {
                        per_token += attn(0, init, h, j);
                    }
                    s += per_token;
                }
                s as f64
            })
            .collect();
        let (subs, surplus) = oracle_capped(n_sub, &scores, n_vit);
        n_full += surplus.min(n_vit - n_full);
        budgets.push(n_full);
        budgets.extend(subs);
    }

    let kept = budgets
        .iter()
        .enumerate()
        .map(|(p, &n)| {
            let f: Vec<f32> = (0..n_vit)
                .map(|j| {
                    let mut acc = 0f32;
                    for h in 0..heads {
                        acc += attn(p, fin, h, j);
                    }
                    acc
                })
                .collect();
            oracle_top_k(&f, n)
        })
        .collect();
    OracleRun { budgets, kept }
}

fn random_factor(rng: &mut impl Rng, n: usize) -> Grid {
    let divisors: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
    let w = divisors[rng.gen_range(0..divisors.len())];
    Grid::new(w, n / w)
}

/// Small random dump: k <= 5, heads <= 4, tokens <= 16. When `dyadic`, every
/// value is a multiple of 2^-10 so sums and scaling by small integers stay
/// exact in f32.
pub fn random_small_dump(rng: &mut impl Rng, dyadic: bool) -> AttentionDump {
    let k = rng.gen_range(0..=5);
    let heads = rng.gen_range(1..=4);
    let tokens = rng.gen_range(1..=16);
    let grid = (k > 0).then(|| random_factor(rng, k));
    let patch_grid = random_factor(rng, tokens);
    let layers = vec![0, 11, 22];
    let meta = DumpMeta {
        image_size: (336, 336),
        grid,
        patch_grid,
        num_heads: heads,
        layers_captured: layers,
    };
    let shape = meta.tensor_shape();
    let tensors = (0..=k)
        .map(|_| {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| {
                    if dyadic {
                        rng.gen_range(0..1024u32) as f32 / 1024.0
                    } else if rng.gen_bool(0.05) {
                        0.0
                    } else {
                        rng.gen::<f32>()
                    }
                })
                .collect();
            Tensor3::new(shape, data).unwrap()
        })
        .collect();
    AttentionDump::new(meta, tensors).unwrap()
}
