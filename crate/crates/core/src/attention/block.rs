//! A fixed-weight joint attention block standing in for a pretrained
//! multimodal transformer layer.
//!
//! Queries and keys share one orthogonal projection and the output
//! projection is the transpose of the value projection, so the block is a
//! content- and position-weighted averaging of token features:
//! `h' = (h + Wvᵀ · attn(Wq h, Wq h, Wv h)) / 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::fusion::{grafted_attention, grafted_attention_with_probs, GraftPacket, TokenSequence};
use super::rope::RopeTable;
use crate::error::{GraftError, Result};
use crate::grid::{FeatureGrid, GridShape};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GraftError::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// A `rows`×`cols` matrix (`rows >= cols`) with orthonormal columns,
    /// from Gram-Schmidt on a seeded Gaussian draw.
    pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if cols > rows {
            return Err(GraftError::Config(format!("cannot fit {cols} orthonormal columns in {rows} rows")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while basis.len() < cols {
            let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Two passes of modified Gram-Schmidt keep the basis orthogonal to
            // working precision.
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let mut data = vec![0.0f32; rows * cols];
        for (c, b) in basis.iter().enumerate() {
            for r in 0..rows {
                data[r * cols + c] = b[r] as f32;
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn orthogonal(n: usize, seed: u64) -> Result<Self> {
        Self::orthonormal_columns(n, n, seed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `out = M x`.
    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `out = Mᵀ x`.
    pub fn apply_transposed(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xr;
            }
        }
    }

    /// Applies `M` to every `cols`-wide row of `rows_in`.
    pub fn apply_rows(&self, rows_in: &[f32]) -> Vec<f32> {
        let n = rows_in.len() / self.cols;
        let mut out = vec![0.0; n * self.rows];
        for (x, o) in rows_in.chunks_exact(self.cols).zip(out.chunks_exact_mut(self.rows)) {
            self.apply(x, o);
        }
        out
    }

    /// Applies `Mᵀ` to every `rows`-wide row of `rows_in`.
    pub fn apply_transposed_rows(&self, rows_in: &[f32]) -> Vec<f32> {
        let n = rows_in.len() / self.rows;
        let mut out = vec![0.0; n * self.cols];
        for (x, o) in rows_in.chunks_exact(self.rows).zip(out.chunks_exact_mut(self.cols)) {
            self.apply_transposed(x, o);
        }
        out
    }
}

/// What a hook asks a block to do with its attention call.
#[derive(Debug, Clone, Default)]
pub enum GraftAction {
    #[default]
    None,
    /// Fuse these reference keys/values into attention.
    Append(GraftPacket),
    /// Use these image-token features as the block input instead.
    Replace(FeatureGrid),
}

/// Image-token tensors seen by one block: its input features and the
/// projected (unrotated) keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    pub input: FeatureGrid,
    pub keys: FeatureGrid,
    pub values: FeatureGrid,
}

/// Everything one block call produces.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub next: BlockInput,
    pub record: Option<BlockRecord>,
    /// Softmax weights as a `heads × n_tokens × n_keys` grid, when requested.
    pub probs: Option<FeatureGrid>,
}

/// Token features entering a block: text rows then image rows, each `width` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInput {
    pub n_txt: usize,
    pub grid: GridShape,
    pub width: usize,
    pub tokens: Vec<f32>,
}

impl BlockInput {
    pub fn new(n_txt: usize, grid: GridShape, width: usize, tokens: Vec<f32>) -> Result<Self> {
        if tokens.len() != (n_txt + grid.len()) * width {
            return Err(GraftError::Shape(format!(
                "{} token values for {} tokens of width {width}",
                tokens.len(),
                n_txt + grid.len()
            )));
        }
        Ok(Self {
            n_txt,
            grid,
            width,
            tokens,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_txt + self.grid.len()
    }

    /// The image rows as a grid of `width`-dimensional features.
    pub fn image_features(&self) -> FeatureGrid {
        let start = self.n_txt * self.width;
        FeatureGrid::new(self.grid.rows, self.grid.cols, self.width, self.tokens[start..].to_vec())
            .expect("block input holds finite values")
    }

    fn replace_image(&mut self, features: &FeatureGrid) -> Result<()> {
        if features.shape() != self.grid || features.dim() != self.width {
            return Err(GraftError::Shape("replacement features do not fit the image tokens".into()));
        }
        let start = self.n_txt * self.width;
        self.tokens[start..].copy_from_slice(features.data());
        Ok(())
    }
}

/// One attention block with seeded orthogonal weights.
#[derive(Debug, Clone)]
pub struct ToyBlock {
    heads: usize,
    head_dim: usize,
    query_key: Matrix,
    value: Matrix,
}

impl ToyBlock {
    pub fn new(heads: usize, head_dim: usize, seed: u64) -> Result<Self> {
        let width = heads * head_dim;
        Ok(Self {
            heads,
            head_dim,
            query_key: Matrix::orthogonal(width, seed)?,
            value: Matrix::orthogonal(width, seed ^ 0x005e_ed0f_7a1e)?,
        })
    }

    /// A block with all-zero projections.
    pub fn zeroed(heads: usize, head_dim: usize) -> Self {
        let width = heads * head_dim;
        Self {
            heads,
            head_dim,
            query_key: Matrix::zeros(width, width),
            value: Matrix::zeros(width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn project(&self, input: &BlockInput) -> Result<TokenSequence> {
        if input.width != self.width() {
            return Err(GraftError::Shape(format!("input width {} vs block width {}", input.width, self.width())));
        }
        let qk = self.query_key.apply_rows(&input.tokens);
        let v = self.value.apply_rows(&input.tokens);
        TokenSequence::new(input.n_txt, input.grid.len(), self.heads, self.head_dim, qk.clone(), qk, v)
    }

    /// Runs the block. Returns the next block input and, when `record` is
    /// set, the image-token input features and keys/values this block saw.
    pub fn forward(
        &self,
        input: &BlockInput,
        rope: &RopeTable,
        action: &GraftAction,
        record: bool,
    ) -> Result<(BlockInput, Option<BlockRecord>)> {
        let out = self.forward_full(input, rope, action, record, false)?;
        Ok((out.next, out.record))
    }

    /// As [`ToyBlock::forward`], optionally keeping the softmax weights.
    pub fn forward_full(
        &self,
        input: &BlockInput,
        rope: &RopeTable,
        action: &GraftAction,
        record: bool,
        keep_probs: bool,
    ) -> Result<BlockOutput> {
        let mut input = input.clone();
        if let GraftAction::Replace(features) = action {
            input.replace_image(features)?;
        }
        let seq = self.project(&input)?;
        let empty;
        let packet = match action {
            GraftAction::Append(p) => p,
            _ => {
                empty = GraftPacket::empty(self.width());
                &empty
            }
        };
        let attention = if keep_probs {
            grafted_attention_with_probs(&seq, rope, packet)?
        } else {
            grafted_attention(&seq, rope, packet)?
        };
        let probs = match attention.probs {
            Some(p) => Some(FeatureGrid::new(self.heads, seq.n_tokens(), attention.n_keys, p)?),
            None => None,
        };
        let attended = attention.out;
        let mixed = self.value.apply_transposed_rows(&attended);
        let tokens: Vec<f32> = input.tokens.iter().zip(&mixed).map(|(h, a)| 0.5 * (h + a)).collect();

        let trace = if record {
            let width = self.width();
            let start = input.n_txt * width;
            let grid = input.grid;
            Some(BlockRecord {
                input: input.image_features(),
                keys: FeatureGrid::new(grid.rows, grid.cols, width, seq.k()[start..].to_vec())?,
                values: FeatureGrid::new(grid.rows, grid.cols, width, seq.v()[start..].to_vec())?,
            })
        } else {
            None
        };
        Ok(BlockOutput {
            next: BlockInput::new(input.n_txt, input.grid, input.width, tokens)?,
            record: trace,
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::rope::build_rope;
    use super::*;
    use rand::Rng;

    fn random_input(n_txt: usize, rows: usize, cols: usize, seed: u64) -> BlockInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridShape::new(rows, cols);
        let tokens = (0..(n_txt + grid.len()) * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        BlockInput::new(n_txt, grid, 64, tokens).unwrap()
    }

    #[test]
    fn orthogonal_matrix_is_orthogonal() {
        let m = Matrix::orthogonal(64, 3).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let d: f32 = (0..64).map(|r| m.data()[r * 64 + i] * m.data()[r * 64 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-5, "({i},{j}) = {d}");
            }
        }
        let tall = Matrix::orthonormal_columns(64, 12, 4).unwrap();
        let x: Vec<f32> = (0..12).map(|i| i as f32 - 5.0).collect();
        let mut y = vec![0.0; 64];
        let mut back = vec![0.0; 12];
        tall.apply(&x, &mut y);
        tall.apply_transposed(&y, &mut back);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let rope = build_rope(3, 3, 2, 16).unwrap();
        let block = ToyBlock::new(4, 16, 1).unwrap();
        let input = BlockInput::new(2, GridShape::new(3, 3), 64, vec![0.0; 11 * 64]).unwrap();
        let (out, _) = block.forward(&input, &rope, &GraftAction::None, false).unwrap();
        assert!(out.tokens.iter().all(|&v| v == 0.0));

        let zeroed = ToyBlock::zeroed(4, 16);
        let input = random_input(2, 3, 3, 5);
        let (out, _) = zeroed.forward(&input, &rope, &GraftAction::None, false).unwrap();
        for (o, h) in out.tokens.iter().zip(&input.tokens) {
            assert_eq!(*o, 0.5 * h);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let rope = build_rope(4, 4, 8, 16).unwrap();
        let input = random_input(8, 4, 4, 6);
        let a = ToyBlock::new(4, 16, 9).unwrap().forward(&input, &rope, &GraftAction::None, true).unwrap();
        let b = ToyBlock::new(4, 16, 9).unwrap().forward(&input, &rope, &GraftAction::None, true).unwrap();
        assert!(a.0.tokens.iter().zip(&b.0.tokens).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn record_holds_pre_projection_image_tokens() {
        let rope = build_rope(4, 4, 8, 16).unwrap();
        let input = random_input(8, 4, 4, 7);
        let block = ToyBlock::new(4, 16, 2).unwrap();
        let (_, rec) = block.forward(&input, &rope, &GraftAction::None, true).unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.input.data(), &input.tokens[8 * 64..]);
        let seq = block.project(&input).unwrap();
        assert_eq!(rec.keys.data(), &seq.k()[8 * 64..]);
        assert_eq!(rec.values.data(), &seq.v()[8 * 64..]);
    }

    #[test]
    fn empty_append_equals_no_action() {
        let rope = build_rope(4, 4, 8, 16).unwrap();
        let input = random_input(8, 4, 4, 8);
        let block = ToyBlock::new(4, 16, 3).unwrap();
        let (a, _) = block.forward(&input, &rope, &GraftAction::None, false).unwrap();
        let (b, _) = block
            .forward(&input, &rope, &GraftAction::Append(GraftPacket::empty(64)), false)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replace_swaps_block_input() {
        let rope = build_rope(2, 2, 1, 16).unwrap();
        let input = random_input(1, 2, 2, 10);
        let other = random_input(1, 2, 2, 11);
        let block = ToyBlock::new(4, 16, 4).unwrap();
        let (_, rec) = block
            .forward(&input, &rope, &GraftAction::Replace(other.image_features()), true)
            .unwrap();
        assert_eq!(rec.unwrap().input, other.image_features());
    }
}
