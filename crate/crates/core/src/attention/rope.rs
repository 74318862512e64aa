//! Axial 2D rotary position embeddings over a patch grid.
//!
//! Each head vector of length `head_dim` is split into `head_dim / 2`
//! adjacent pairs. The first half of the pairs rotate by row-coordinate
//! phases, the second half by column-coordinate phases, each half with a
//! geometric ladder of frequencies `theta^(-k / quarter)`. Text tokens sit at
//! coordinate (0, 0), so their rotation is the identity.

use crate::error::{GraftError, Result};
use crate::grid::{GridShape, PatchCoord};

/// Frequency base. Small grids need fast-rotating bands to tell neighbours apart.
pub const DEFAULT_ROPE_THETA: f32 = 16.0;

/// Per-token phase angles.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    grid: GridShape,
    n_txt: usize,
    head_dim: usize,
    theta: f32,
    angles: Vec<f32>,
}

impl RopeTable {
    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn n_txt(&self) -> usize {
        self.n_txt
    }

    pub fn n_tokens(&self) -> usize {
        self.n_txt + self.grid.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    pub fn theta(&self) -> f32 {
        self.theta
    }

    /// Phase row of token `token` (text tokens first, then image tokens row-major).
    pub fn angles(&self, token: usize) -> &[f32] {
        let p = self.pairs();
        &self.angles[token * p..(token + 1) * p]
    }

    pub fn image_angles(&self, coord: PatchCoord) -> Result<&[f32]> {
        let idx = self.grid.index(coord)?;
        Ok(self.angles(self.n_txt + idx))
    }
}

/// Phases for a single coordinate.
pub fn axial_angles(coord: PatchCoord, head_dim: usize, theta: f32) -> Vec<f32> {
    let quarter = head_dim / 4;
    let mut out = Vec::with_capacity(head_dim / 2);
    for (axis_pos, _) in [(coord.row, 0), (coord.col, 1)] {
        for k in 0..quarter {
            let freq = theta.powf(-(k as f32) / quarter as f32);
            out.push(axis_pos as f32 * freq);
        }
    }
    out
}

pub fn build_rope(rows: usize, cols: usize, n_txt: usize, head_dim: usize) -> Result<RopeTable> {
    build_rope_with_theta(rows, cols, n_txt, head_dim, DEFAULT_ROPE_THETA)
}

pub fn build_rope_with_theta(rows: usize, cols: usize, n_txt: usize, head_dim: usize, theta: f32) -> Result<RopeTable> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(GraftError::Config(format!(
            "head dim {head_dim} must be a positive multiple of 4"
        )));
    }
    if !(theta > 1.0) {
        return Err(GraftError::Config(format!("rope theta {theta} must exceed 1")));
    }
    let grid = GridShape::new(rows, cols);
    let mut angles = Vec::with_capacity((n_txt + grid.len()) * head_dim / 2);
    for _ in 0..n_txt {
        angles.extend(axial_angles(PatchCoord::new(0, 0), head_dim, theta));
    }
    for idx in 0..grid.len() {
        angles.extend(axial_angles(grid.coord(idx)?, head_dim, theta));
    }
    Ok(RopeTable {
        grid,
        n_txt,
        head_dim,
        theta,
        angles,
    })
}

/// Rotates consecutive pairs of `v` in place; `v.len() == 2 * angles.len()`.
pub fn rotate(v: &mut [f32], angles: &[f32]) {
    debug_assert_eq!(v.len(), 2 * angles.len());
    for (pair, &a) in v.chunks_exact_mut(2).zip(angles) {
        let (s, c) = a.sin_cos();
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * c - y * s;
        pair[1] = x * s + y * c;
    }
}

/// Rotates every head slice of a `heads * head_dim` token row.
pub fn rotate_heads(row: &mut [f32], angles: &[f32]) {
    let head_dim = 2 * angles.len();
    for head in row.chunks_exact_mut(head_dim) {
        rotate(head, angles);
    }
}
