//! Dynamic partition layout and the mapping from sub-images to the
//! full-image patch tokens they cover.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("candidate grid list is empty")]
    EmptyCandidateList,
    #[error("sub-image {index} out of range 1..={count}")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
}

/// A `width x height` cell count, used both for the sub-image grid and the
/// ViT patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct Grid {
    pub w: usize,
    pub h: usize,
}

impl Grid {
    pub const fn new(w: usize, h: usize) -> Self {
        Self { w, h }
    }

    pub const fn area(self) -> usize {
        self.w * self.h
    }

    /// Picks the most nearly square factorisation `w x h` of `n` with `w >= h`.
    pub fn most_square(n: usize) -> Self {
        let mut h = (n as f64).sqrt() as usize;
        while h > 1 && !n.is_multiple_of(h) {
            h -= 1;
        }
        let h = h.max(1);
        Self { w: n / h, h }
    }
}

impl From<Grid> for [usize; 2] {
    fn from(g: Grid) -> Self {
        [g.w, g.h]
    }
}

impl From<[usize; 2]> for Grid {
    fn from([w, h]: [usize; 2]) -> Self {
        Self { w, h }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.w, self.h)
    }
}

impl FromStr for Grid {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeometryError::InvalidDimensions(format!("expected WxH, got '{s}'"));
        let (w, h) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let w: usize = w.parse().map_err(|_| bad())?;
        let h: usize = h.parse().map_err(|_| bad())?;
        if w == 0 || h == 0 {
            return Err(GeometryError::InvalidDimensions(format!(
                "grid '{s}' has an empty side"
            )));
        }
        Ok(Self { w, h })
    }
}

/// Candidate sub-image grids considered by [`plan_partitions`] when the host
/// does not supply its own list.
pub const DEFAULT_CANDIDATES: [Grid; 8] = [
    Grid::new(1, 1),
    Grid::new(1, 2),
    Grid::new(2, 1),
    Grid::new(2, 2),
    Grid::new(1, 3),
    Grid::new(3, 1),
    Grid::new(1, 4),
    Grid::new(4, 1),
];

/// Native square input resolution of the CLIP ViT-L/336 encoder.
pub const DEFAULT_BASE_RESOLUTION: usize = 336;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLayout {
    /// `None` for a single full-image partition with no sub-images.
    pub grid: Option<Grid>,
    pub patch_grid: Grid,
    pub image_size: (usize, usize),
    /// `token_index_sets[i - 1]` lists the full-image tokens covered by
    /// sub-image `i`, ascending.
    pub token_index_sets: Vec<Vec<usize>>,
}

impl PartitionLayout {
    pub fn new(
        grid: Option<Grid>,
        patch_grid: Grid,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        if patch_grid.area() == 0 {
            return Err(GeometryError::InvalidDimensions(format!(
                "patch grid {patch_grid} is empty"
            )));
        }
        let token_index_sets = match grid {
            Some(g) if g.area() == 0 => {
                return Err(GeometryError::InvalidDimensions(format!(
                    "sub-image grid {g} is empty"
                )))
            }
            Some(g) => (1..=g.area())
                .map(|i| map_subimage_tokens(g, patch_grid, i))
                .collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            grid,
            patch_grid,
            image_size,
            token_index_sets,
        })
    }

    /// Layout for a low-resolution run: the full image only.
    pub fn full_only(patch_grid: Grid, image_size: (usize, usize)) -> Result<Self, GeometryError> {
        Self::new(None, patch_grid, image_size)
    }

    /// Number of sub-images.
    pub fn k(&self) -> usize {
        self.grid.map_or(0, Grid::area)
    }

    pub fn tokens_per_partition(&self) -> usize {
        self.patch_grid.area()
    }
}

/// Scores one candidate: `(covered source area, padding area)`. The image is
/// scaled to fit the candidate canvas with its aspect ratio preserved, and
/// never upscaled beyond its own pixel count.
fn candidate_fit(image_w: usize, image_h: usize, canvas_w: usize, canvas_h: usize) -> (u128, u128) {
    let (iw, ih, cw, ch) = (
        image_w as u128,
        image_h as u128,
        canvas_w as u128,
        canvas_h as u128,
    );
    // scale = min(cw / iw, ch / ih), compared exactly by cross-multiplying
    let (scaled_w, scaled_h) = if cw * ih <= ch * iw {
        (cw, ih * cw / iw)
    } else {
        (iw * ch / ih, ch)
    };
    let covered = (scaled_w * scaled_h).min(iw * ih);
    (covered, cw * ch - covered)
}

/// Chooses the sub-image grid for an image and computes its layout.
///
/// The winning candidate covers the most source pixels; ties go to the one
/// with less padding, then to the earlier entry in `candidates`.
pub fn plan_partitions(
    image_w: usize,
    image_h: usize,
    candidates: &[Grid],
    base_resolution: usize,
    patch_grid: Grid,
) -> Result<PartitionLayout, GeometryError> {
    if image_w == 0 || image_h == 0 || base_resolution == 0 {
        return Err(GeometryError::InvalidDimensions(format!(
            "image {image_w}x{image_h} at base resolution {base_resolution}"
        )));
    }
    if let Some(g) = candidates.iter().find(|g| g.area() == 0) {
        return Err(GeometryError::InvalidDimensions(format!(
            "candidate grid {g} is empty"
        )));
    }
    let mut best: Option<(Grid, u128, u128)> = None;
    for &g in candidates {
        let (covered, padding) = candidate_fit(
            image_w,
            image_h,
            g.w * base_resolution,
            g.h * base_resolution,
        );
        let better = match best {
            None => true,
            Some((_, best_cov, best_pad)) => {
                covered > best_cov || (covered == best_cov && padding < best_pad)
            }
        };
        if better {
            best = Some((g, covered, padding));
        }
    }
    let (grid, _, _) = best.ok_or(GeometryError::EmptyCandidateList)?;
    PartitionLayout::new(Some(grid), patch_grid, (image_w, image_h))
}

/// Full-image token indices whose patch centres fall inside sub-image `i`
/// (1-based, row-major over the grid). Intervals are half-open, so each patch
/// belongs to exactly one sub-image.
pub fn map_subimage_tokens(
    grid: Grid,
    patch_grid: Grid,
    i: usize,
) -> Result<Vec<usize>, GeometryError> {
    let count = grid.area();
    if i == 0 || i > count {
        return Err(GeometryError::IndexOutOfRange { index: i, count });
    }
    let row = (i - 1) / grid.w;
    let col = (i - 1) % grid.w;
    // centre (c + 0.5) / P lies in [col / g, (col + 1) / g) iff
    // floor((2c + 1) * g / (2P)) == col
    let cell = |p: usize, g: usize, patches: usize| ((2 * p + 1) * g / (2 * patches)).min(g - 1);
    let mut tokens = Vec::new();
    for r in 0..patch_grid.h {
        if cell(r, grid.h, patch_grid.h) != row {
            continue;
        }
        for c in 0..patch_grid.w {
            if cell(c, grid.w, patch_grid.w) == col {
                tokens.push(r * patch_grid.w + c);
            }
        }
    }
    Ok(tokens)
}
