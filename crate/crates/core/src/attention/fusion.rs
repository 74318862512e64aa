//! Joint text/image attention and position-constrained fusion of grafted
//! reference keys and values.

use rayon::prelude::*;

use super::rope::{rotate_heads, RopeTable};
use crate::error::{GraftError, Result};
use crate::grid::{BinaryMask, FeatureGrid, GridShape, PatchCoord};
use crate::matching::Matching;

/// Per-head queries, keys and values for `n_txt` text tokens followed by
/// `n_img` image tokens in row-major grid order. Each row is
/// `heads * head_dim` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    n_txt: usize,
    n_img: usize,
    heads: usize,
    head_dim: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl TokenSequence {
    pub fn new(
        n_txt: usize,
        n_img: usize,
        heads: usize,
        head_dim: usize,
        q: Vec<f32>,
        k: Vec<f32>,
        v: Vec<f32>,
    ) -> Result<Self> {
        let want = (n_txt + n_img) * heads * head_dim;
        for (name, buf) in [("q", &q), ("k", &k), ("v", &v)] {
            if buf.len() != want {
                return Err(GraftError::Shape(format!("{name} has {} values, expected {want}", buf.len())));
            }
        }
        Ok(Self {
            n_txt,
            n_img,
            heads,
            head_dim,
            q,
            k,
            v,
        })
    }

    pub fn n_txt(&self) -> usize {
        self.n_txt
    }

    pub fn n_img(&self) -> usize {
        self.n_img
    }

    pub fn n_tokens(&self) -> usize {
        self.n_txt + self.n_img
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn q(&self) -> &[f32] {
        &self.q
    }

    pub fn k(&self) -> &[f32] {
        &self.k
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    fn check_rope(&self, rope: &RopeTable) -> Result<()> {
        if rope.n_txt() != self.n_txt || rope.grid().len() != self.n_img || rope.head_dim() != self.head_dim {
            return Err(GraftError::Shape(format!(
                "rope table ({} txt, {} img, head dim {}) does not fit sequence ({} txt, {} img, head dim {})",
                rope.n_txt(),
                rope.grid().len(),
                rope.head_dim(),
                self.n_txt,
                self.n_img,
                self.head_dim
            )));
        }
        Ok(())
    }
}

/// Reference key/value rows injected into one (block, timestep), with the
/// generated-grid coordinate whose position embedding each row borrows.
#[derive(Debug, Clone, PartialEq)]
pub struct GraftPacket {
    width: usize,
    k: Vec<f32>,
    v: Vec<f32>,
    coords: Vec<PatchCoord>,
    ref_indices: Vec<usize>,
    pub block: usize,
    pub t: f32,
}

impl GraftPacket {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            k: Vec::new(),
            v: Vec::new(),
            coords: Vec::new(),
            ref_indices: Vec::new(),
            block: 0,
            t: 0.0,
        }
    }

    pub fn new(
        width: usize,
        k: Vec<f32>,
        v: Vec<f32>,
        coords: Vec<PatchCoord>,
        ref_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = coords.len();
        if k.len() != n * width || v.len() != n * width || ref_indices.len() != n {
            return Err(GraftError::Shape(format!(
                "packet of {n} rows needs {} key/value values and {n} indices",
                n * width
            )));
        }
        Ok(Self {
            width,
            k,
            v,
            coords,
            ref_indices,
            block: 0,
            t: 0.0,
        })
    }

    /// Collects the masked rows of reference keys/values (N×width grids),
    /// in ascending reference index, each tagged with the coordinate from
    /// `coord_of`.
    pub fn gather(
        ref_k: &FeatureGrid,
        ref_v: &FeatureGrid,
        mask: &BinaryMask,
        mut coord_of: impl FnMut(usize) -> Result<PatchCoord>,
    ) -> Result<Self> {
        if ref_k.shape() != mask.shape() || ref_v.shape() != mask.shape() || ref_k.dim() != ref_v.dim() {
            return Err(GraftError::Shape("reference keys, values and mask disagree".into()));
        }
        let width = ref_k.dim();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut coords = Vec::new();
        let mut ref_indices = Vec::new();
        for i in mask.ones_indices() {
            k.extend_from_slice(ref_k.vector(i));
            v.extend_from_slice(ref_v.vector(i));
            coords.push(coord_of(i)?);
            ref_indices.push(i);
        }
        Self::new(width, k, v, coords, ref_indices)
    }

    pub fn with_origin(mut self, block: usize, t: f32) -> Self {
        self.block = block;
        self.t = t;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn k(&self) -> &[f32] {
        &self.k
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn coords(&self) -> &[PatchCoord] {
        &self.coords
    }

    pub fn ref_indices(&self) -> &[usize] {
        &self.ref_indices
    }

    /// Appends the rows of `other` after those of `self`.
    pub fn merge(&self, other: &GraftPacket) -> Result<GraftPacket> {
        if self.width != other.width {
            return Err(GraftError::Shape(format!("packet widths {} vs {}", self.width, other.width)));
        }
        let mut out = self.clone();
        out.k.extend_from_slice(&other.k);
        out.v.extend_from_slice(&other.v);
        out.coords.extend_from_slice(&other.coords);
        out.ref_indices.extend_from_slice(&other.ref_indices);
        Ok(out)
    }

    /// Reorders rows by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Result<GraftPacket> {
        let mut seen = vec![false; self.len()];
        for &o in order {
            if o >= self.len() || std::mem::replace(&mut seen[o], true) {
                return Err(GraftError::Shape("order is not a permutation".into()));
            }
        }
        if order.len() != self.len() {
            return Err(GraftError::Shape("order is not a permutation".into()));
        }
        let w = self.width;
        let mut out = GraftPacket::empty(w).with_origin(self.block, self.t);
        for &o in order {
            out.k.extend_from_slice(&self.k[o * w..(o + 1) * w]);
            out.v.extend_from_slice(&self.v[o * w..(o + 1) * w]);
            out.coords.push(self.coords[o]);
            out.ref_indices.push(self.ref_indices[o]);
        }
        Ok(out)
    }
}

/// `[K_txt; K_img; K_ref]` and `[V_txt; V_img; V_ref]`, row-major.
pub fn concat_kv(seq: &TokenSequence, packet: &GraftPacket) -> Result<(Vec<f32>, Vec<f32>)> {
    if !packet.is_empty() && packet.width != seq.width() {
        return Err(GraftError::Shape(format!(
            "packet width {} vs sequence width {}",
            packet.width,
            seq.width()
        )));
    }
    let mut k = Vec::with_capacity(seq.k.len() + packet.k.len());
    k.extend_from_slice(&seq.k);
    k.extend_from_slice(&packet.k);
    let mut v = Vec::with_capacity(seq.v.len() + packet.v.len());
    v.extend_from_slice(&seq.v);
    v.extend_from_slice(&packet.v);
    Ok((k, v))
}

/// Phase rows for the concatenated keys. Grafted rows take the phase of the
/// generated token at their packet coordinate.
pub fn concat_pe(rope: &RopeTable, packet: &GraftPacket) -> Result<Vec<f32>> {
    let pairs = rope.pairs();
    let mut out = Vec::with_capacity((rope.n_tokens() + packet.len()) * pairs);
    for tok in 0..rope.n_tokens() {
        out.extend_from_slice(rope.angles(tok));
    }
    for &c in &packet.coords {
        out.extend_from_slice(rope.image_angles(c)?);
    }
    Ok(out)
}

/// Attention weights and outputs for one call.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `n_tokens × width` outputs, text first.
    pub out: Vec<f32>,
    /// `heads × n_tokens × n_keys` softmax weights, when requested.
    pub probs: Option<Vec<f32>>,
    pub n_keys: usize,
}

fn rotated_rows(data: &[f32], width: usize, pe: &[f32], pairs: usize) -> Vec<f32> {
    let mut out = data.to_vec();
    for (r, row) in out.chunks_exact_mut(width).enumerate() {
        rotate_heads(row, &pe[r * pairs..(r + 1) * pairs]);
    }
    out
}

struct Prepared {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    n_q: usize,
    n_k: usize,
}

fn prepare(seq: &TokenSequence, rope: &RopeTable, packet: &GraftPacket) -> Result<Prepared> {
    seq.check_rope(rope)?;
    let width = seq.width();
    let pairs = rope.pairs();
    let (k_cat, v_cat) = concat_kv(seq, packet)?;
    let pe_cat = concat_pe(rope, packet)?;
    let q_pe = &pe_cat[..seq.n_tokens() * pairs];
    Ok(Prepared {
        q: rotated_rows(&seq.q, width, q_pe, pairs),
        k: rotated_rows(&k_cat, width, &pe_cat, pairs),
        v: v_cat,
        n_q: seq.n_tokens(),
        n_k: seq.n_tokens() + packet.len(),
    })
}

fn head_logits(p: &Prepared, width: usize, head_dim: usize, head: usize, query: usize, out: &mut [f32]) {
    let scale = 1.0 / (head_dim as f32).sqrt();
    let off = head * head_dim;
    let q = &p.q[query * width + off..query * width + off + head_dim];
    for (key, slot) in out.iter_mut().enumerate() {
        let k = &p.k[key * width + off..key * width + off + head_dim];
        let mut acc = 0.0f32;
        for d in 0..head_dim {
            acc += q[d] * k[d];
        }
        *slot = acc * scale;
    }
}

/// Pre-softmax logits `Q̃ K̃ᵀ / √d` of one head, `n_tokens × n_keys`.
pub fn grafted_logits(seq: &TokenSequence, rope: &RopeTable, packet: &GraftPacket, head: usize) -> Result<Vec<f32>> {
    if head >= seq.heads {
        return Err(GraftError::Bounds(format!("head {head} of {}", seq.heads)));
    }
    let p = prepare(seq, rope, packet)?;
    let mut out = vec![0.0; p.n_q * p.n_k];
    for (query, row) in out.chunks_exact_mut(p.n_k).enumerate() {
        head_logits(&p, seq.width(), seq.head_dim, head, query, row);
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for &x in row.iter() {
        if !x.is_finite() {
            return Err(GraftError::Numerical(format!("attention logit {x}")));
        }
        max = max.max(x);
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Attention over `[text; generated image; grafted reference]` keys with
/// queries from text and generated tokens only. The output always has
/// `n_txt + n_img` rows.
pub fn grafted_attention(seq: &TokenSequence, rope: &RopeTable, packet: &GraftPacket) -> Result<AttentionOutput> {
    attention_impl(seq, rope, packet, false)
}

/// As [`grafted_attention`], also returning the softmax weights.
pub fn grafted_attention_with_probs(seq: &TokenSequence, rope: &RopeTable, packet: &GraftPacket) -> Result<AttentionOutput> {
    attention_impl(seq, rope, packet, true)
}

fn attention_impl(seq: &TokenSequence, rope: &RopeTable, packet: &GraftPacket, keep_probs: bool) -> Result<AttentionOutput> {
    let p = prepare(seq, rope, packet)?;
    let width = seq.width();
    let head_dim = seq.head_dim;
    let heads = seq.heads;
    let n_k = p.n_k;

    // One task per query row; each row owns its output slice and its own
    // reduction order, so the schedule cannot change the result.
    let rows: Vec<Result<(Vec<f32>, Vec<f32>)>> = (0..p.n_q)
        .into_par_iter()
        .map(|query| {
            let mut out = vec![0.0f32; width];
            let mut probs = if keep_probs { Vec::with_capacity(heads * n_k) } else { Vec::new() };
            let mut logits = vec![0.0f32; n_k];
            for head in 0..heads {
                head_logits(&p, width, head_dim, head, query, &mut logits);
                softmax_in_place(&mut logits)?;
                let off = head * head_dim;
                let o = &mut out[off..off + head_dim];
                for (key, &w) in logits.iter().enumerate() {
                    let v = &p.v[key * width + off..key * width + off + head_dim];
                    for d in 0..head_dim {
                        o[d] += w * v[d];
                    }
                }
                if keep_probs {
                    probs.extend_from_slice(&logits);
                }
            }
            Ok((out, probs))
        })
        .collect();

    let mut out = Vec::with_capacity(p.n_q * width);
    let mut per_query_probs = Vec::new();
    for r in rows {
        let (o, pr) = r?;
        out.extend(o);
        if keep_probs {
            per_query_probs.push(pr);
        }
    }
    let probs = keep_probs.then(|| {
        let mut all = vec![0.0f32; heads * p.n_q * n_k];
        for (query, pr) in per_query_probs.iter().enumerate() {
            for head in 0..heads {
                let dst = (head * p.n_q + query) * n_k;
                all[dst..dst + n_k].copy_from_slice(&pr[head * n_k..(head + 1) * n_k]);
            }
        }
        all
    });
    Ok(AttentionOutput { out, probs, n_keys: n_k })
}

/// Plain joint attention over text and image tokens, written independently
/// of the fused path.
pub fn joint_attention(seq: &TokenSequence, rope: &RopeTable) -> Result<Vec<f32>> {
    seq.check_rope(rope)?;
    let n = seq.n_tokens();
    let (heads, hd) = (seq.heads, seq.head_dim);
    let width = seq.width();
    let mut q = seq.q.clone();
    let mut k = seq.k.clone();
    for tok in 0..n {
        rotate_heads(&mut q[tok * width..(tok + 1) * width], rope.angles(tok));
        rotate_heads(&mut k[tok * width..(tok + 1) * width], rope.angles(tok));
    }
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; n * width];
    for h in 0..heads {
        for i in 0..n {
            let qi = &q[i * width + h * hd..i * width + (h + 1) * hd];
            let logits: Vec<f32> = (0..n)
                .map(|j| {
                    let kj = &k[j * width + h * hd..j * width + (h + 1) * hd];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale
                })
                .collect();
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(GraftError::Numerical("attention logit".into()));
            }
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = logits.iter().map(|x| (x - max).exp()).collect();
            let z: f32 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for d in 0..hd {
                    out[i * width + h * hd + d] += e / z * seq.v[j * width + h * hd + d];
                }
            }
        }
    }
    Ok(out)
}

/// Overwrites generated patch `m(i)` with reference patch `i` for every set
/// bit of `mask`, in ascending `i` (the last writer wins).
pub fn replace_features(
    generated: &FeatureGrid,
    reference: &FeatureGrid,
    matching: &Matching,
    mask: &BinaryMask,
) -> Result<FeatureGrid> {
    if generated.dim() != reference.dim() {
        return Err(GraftError::Shape("feature dims differ".into()));
    }
    if mask.shape() != reference.shape() || matching.ref_shape() != reference.shape() {
        return Err(GraftError::Shape("mask/matching do not fit the reference grid".into()));
    }
    let mut out = generated.clone();
    for i in mask.ones_indices() {
        if let Some(j) = matching.forward[i] {
            out.vector_mut(j).copy_from_slice(reference.vector(i));
        }
    }
    Ok(out)
}

/// Generated-grid coordinate of each masked reference patch's match.
pub fn matched_coord(matching: &Matching, gen_shape: GridShape, i: usize) -> Result<PatchCoord> {
    let j = matching.forward[i]
        .ok_or_else(|| GraftError::Bounds(format!("reference patch {i} has no match")))?;
    gen_shape.coord(j)
}
