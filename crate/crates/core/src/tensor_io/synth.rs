//! Seeded synthetic attention dumps for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dump::{AttentionDump, DumpError, DumpMeta};
use super::npy::Tensor3;
use crate::geometry::{Grid, DEFAULT_BASE_RESOLUTION};

/// Generates a dump with `k` sub-images, `heads` heads and `tokens` patch
/// tokens per partition. Every attention row is strictly positive and sums to
/// one (up to `f32` rounding).
///
/// The sub-image grid and the patch grid are the most nearly square
/// factorisations of `k` and `tokens`.
pub fn generate_synthetic_dump(
    seed: u64,
    k: usize,
    heads: usize,
    tokens: usize,
    layers_captured: &[usize],
) -> Result<AttentionDump, DumpError> {
    let grid = (k > 0).then(|| Grid::most_square(k));
    let image_size = grid.map_or((DEFAULT_BASE_RESOLUTION, DEFAULT_BASE_RESOLUTION), |g| {
        (g.w * DEFAULT_BASE_RESOLUTION, g.h * DEFAULT_BASE_RESOLUTION)
    });
    let meta = DumpMeta {
        image_size,
        grid,
        patch_grid: Grid::most_square(tokens),
        num_heads: heads,
        layers_captured: layers_captured.to_vec(),
    };
    generate_with_meta(seed, meta)
}

/// Fills a dump with seeded attention for the geometry described by `meta`.
pub fn generate_with_meta(seed: u64, meta: DumpMeta) -> Result<AttentionDump, DumpError> {
    let shape = meta.tensor_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = vec![0f64; shape[2]];
    let tensors = (0..=meta.k())
        .map(|_| {
            let mut t = Tensor3::zeros(shape);
            for layer in 0..shape[0] {
                for head in 0..shape[1] {
                    // (0, 1], cubed for a more peaked distribution
                    for v in row.iter_mut() {
                        let u = 1.0 - rng.gen::<f64>();
                        *v = u * u * u;
                    }
                    let total: f64 = row.iter().sum();
                    for (dst, v) in t.row_mut(layer, head).iter_mut().zip(&row) {
                        *dst = (v / total) as f32;
                    }
                }
            }
            t
        })
        .collect();
    AttentionDump::new(meta, tensors)
}
