//! Raster and patch-token types shared by every stage.
//!
//! All grids are row-major. A patch covers `PATCH_SIZE`×`PATCH_SIZE` pixels,
//! so an image of `w`×`h` pixels maps onto a `h/PATCH_SIZE`×`w/PATCH_SIZE`
//! token grid.

use crate::error::{GraftError, Result};

/// Edge length of one patch token, in pixels.
pub const PATCH_SIZE: usize = 2;

/// Number of channels in a [`PixelImage`].
pub const CHANNELS: usize = 3;

/// Length of a raw patch vector (`PATCH_SIZE² × CHANNELS`).
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE * CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchCoord {
    pub row: usize,
    pub col: usize,
}

impl PatchCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Euclidean distance in patch units.
    pub fn distance(&self, other: &PatchCoord) -> f32 {
        let dr = self.row as f32 - other.row as f32;
        let dc = self.col as f32 - other.col as f32;
        (dr * dr + dc * dc).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, coord: PatchCoord) -> bool {
        coord.row < self.rows && coord.col < self.cols
    }

    pub fn index(&self, coord: PatchCoord) -> Result<usize> {
        if !self.contains(coord) {
            return Err(GraftError::Bounds(format!(
                "({}, {}) outside {}x{} grid",
                coord.row, coord.col, self.rows, self.cols
            )));
        }
        Ok(coord.row * self.cols + coord.col)
    }

    pub fn coord(&self, index: usize) -> Result<PatchCoord> {
        if index >= self.len() {
            return Err(GraftError::Bounds(format!(
                "index {index} outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(PatchCoord::new(index / self.cols, index % self.cols))
    }
}

/// Row-major linear index of `coord` in a grid of `shape`.
pub fn patch_index(coord: PatchCoord, shape: GridShape) -> Result<usize> {
    shape.index(coord)
}

pub fn index_to_coord(index: usize, shape: GridShape) -> Result<PatchCoord> {
    shape.coord(index)
}

/// RGB image with channel values in `[0, 1]`, stored interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(PATCH_SIZE) || !height.is_multiple_of(PATCH_SIZE) {
            return Err(GraftError::Shape(format!(
                "image {width}x{height} is not a positive multiple of the patch size {PATCH_SIZE}"
            )));
        }
        if data.len() != width * height * CHANNELS {
            return Err(GraftError::Shape(format!(
                "expected {} channel values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GraftError::Domain(format!("channel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn patch_shape(&self) -> GridShape {
        GridShape::new(self.height / PATCH_SIZE, self.width / PATCH_SIZE)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Writes a pixel, clamping each channel into `[0, 1]`.
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * CHANNELS;
        for (c, v) in rgb.iter().enumerate() {
            self.data[o + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Flattens each patch into a `PATCH_DIM` vector mapped to `[-1, 1]`.
    pub fn to_latent(&self) -> FeatureGrid {
        let shape = self.patch_shape();
        let mut data = Vec::with_capacity(shape.len() * PATCH_DIM);
        for pr in 0..shape.rows {
            for pc in 0..shape.cols {
                for dy in 0..PATCH_SIZE {
                    for dx in 0..PATCH_SIZE {
                        let px = self.pixel(pc * PATCH_SIZE + dx, pr * PATCH_SIZE + dy);
                        data.extend(px.iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
        FeatureGrid {
            rows: shape.rows,
            cols: shape.cols,
            dim: PATCH_DIM,
            data,
        }
    }

    /// Inverse of [`PixelImage::to_latent`]; values are clamped into range.
    pub fn from_latent(latent: &FeatureGrid) -> Result<Self> {
        if latent.dim() != PATCH_DIM {
            return Err(GraftError::Shape(format!(
                "latent dim {} != patch dim {PATCH_DIM}",
                latent.dim()
            )));
        }
        let width = latent.cols() * PATCH_SIZE;
        let height = latent.rows() * PATCH_SIZE;
        let mut img = PixelImage::filled(width, height, [0.0; 3])?;
        for pr in 0..latent.rows() {
            for pc in 0..latent.cols() {
                let v = latent.vector(pr * latent.cols() + pc);
                for dy in 0..PATCH_SIZE {
                    for dx in 0..PATCH_SIZE {
                        let o = (dy * PATCH_SIZE + dx) * CHANNELS;
                        let rgb = [
                            (v[o] + 1.0) * 0.5,
                            (v[o + 1] + 1.0) * 0.5,
                            (v[o + 2] + 1.0) * 0.5,
                        ];
                        img.set_pixel(pc * PATCH_SIZE + dx, pr * PATCH_SIZE + dy, rgb);
                    }
                }
            }
        }
        Ok(img)
    }
}

/// A `rows`×`cols` grid of `dim`-dimensional finite vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(GraftError::Shape(format!(
                "feature grid {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GraftError::Numerical(format!("feature value at {pos} is {}", data[pos])));
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> GridShape {
        GridShape::new(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn max_abs_diff(&self, other: &FeatureGrid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Boolean grid, used both at patch resolution and pixel resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(GraftError::Shape(format!(
                "mask {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> GridShape {
        GridShape::new(self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn set_at(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.cols + col] = value;
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of set bits in ascending order.
    pub fn ones_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(GraftError::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask {
            rows: self.rows,
            cols: self.cols,
            bits,
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask {
            rows: self.rows,
            cols: self.cols,
            bits,
        })
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect();
        Ok(BinaryMask {
            rows: self.rows,
            cols: self.cols,
            bits,
        })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Pixel mask → patch mask: a patch is set when any of its pixels is.
    pub fn downsample_any(&self, patch: usize) -> Result<BinaryMask> {
        if patch == 0 || !self.rows.is_multiple_of(patch) || !self.cols.is_multiple_of(patch) {
            return Err(GraftError::Shape(format!(
                "mask {}x{} not divisible by patch {patch}",
                self.rows, self.cols
            )));
        }
        let mut out = BinaryMask::zeros(self.rows / patch, self.cols / patch);
        for y in 0..self.rows {
            for x in 0..self.cols {
                if self.at(y, x) {
                    out.set_at(y / patch, x / patch, true);
                }
            }
        }
        Ok(out)
    }

    /// Bounding box of the set bits as `(x, y, w, h)`.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut min_x = usize::MAX;
        let mut min_y = usize::MAX;
        let mut max_x = 0;
        let mut max_y = 0;
        let mut any = false;
        for y in 0..self.rows {
            for x in 0..self.cols {
                if self.at(y, x) {
                    any = true;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
        any.then(|| (min_x, min_y, max_x - min_x + 1, max_y - min_y + 1))
    }
}

/// Elementwise conjunction of two equally shaped masks.
pub fn mask_and(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.and(b)
}

pub fn mask_popcount(m: &BinaryMask) -> usize {
    m.popcount()
}
