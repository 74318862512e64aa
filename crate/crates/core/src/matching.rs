//! Cosine-similarity correspondence between reference and generated patch
//! features, the two match filters, and the per-timestep dropout schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GraftError, Result};
use crate::grid::{mask_and, BinaryMask, FeatureGrid, GridShape};

/// Similarity stored for reference rows outside the pre-mask. Below any
/// attainable cosine, so it is never selected.
pub const UNMASKED_SIMILARITY: f32 = -2.0;

/// Default similarity threshold.
pub const DEFAULT_TAU: f32 = 0.2;
/// Default cycle-consistency radius, in patch units.
pub const DEFAULT_DELTA: f32 = 1.5;
/// Default dropout intensity.
pub const DEFAULT_OMEGA: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    ref_shape: GridShape,
    gen_shape: GridShape,
    values: Vec<f32>,
}

impl SimMatrix {
    pub fn n_ref(&self) -> usize {
        self.ref_shape.len()
    }

    pub fn n_gen(&self) -> usize {
        self.gen_shape.len()
    }

    pub fn ref_shape(&self) -> GridShape {
        self.ref_shape
    }

    pub fn gen_shape(&self) -> GridShape {
        self.gen_shape
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n_gen() + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_gen()..(i + 1) * self.n_gen()]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The matrix as an `n_ref`×`n_gen`×1 grid, for dumping.
    pub fn to_feature_grid(&self) -> Result<FeatureGrid> {
        FeatureGrid::new(self.n_ref(), self.n_gen(), 1, self.values.clone())
    }
}

/// Correspondence state for every reference patch. Entries for patches
/// outside the pre-mask stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    ref_shape: GridShape,
    gen_shape: GridShape,
    pub forward: Vec<Option<usize>>,
    pub best_sim: Vec<f32>,
    pub reverse: Vec<Option<usize>>,
    pub cycle_dist: Vec<Option<f32>>,
}

impl Matching {
    pub fn empty(ref_shape: GridShape, gen_shape: GridShape) -> Self {
        let n = ref_shape.len();
        Self {
            ref_shape,
            gen_shape,
            forward: vec![None; n],
            best_sim: vec![UNMASKED_SIMILARITY; n],
            reverse: vec![None; n],
            cycle_dist: vec![None; n],
        }
    }

    /// Builds a matching from explicit forward indices; similarities are set to 1.
    pub fn from_forward(ref_shape: GridShape, gen_shape: GridShape, forward: Vec<Option<usize>>) -> Result<Self> {
        if forward.len() != ref_shape.len() {
            return Err(GraftError::Shape(format!(
                "{} forward entries for {} reference patches",
                forward.len(),
                ref_shape.len()
            )));
        }
        if let Some(j) = forward.iter().flatten().find(|&&j| j >= gen_shape.len()) {
            return Err(GraftError::Bounds(format!("forward index {j} outside generated grid")));
        }
        let mut m = Self::empty(ref_shape, gen_shape);
        for (i, f) in forward.iter().enumerate() {
            if f.is_some() {
                m.best_sim[i] = 1.0;
            }
        }
        m.forward = forward;
        Ok(m)
    }

    pub fn ref_shape(&self) -> GridShape {
        self.ref_shape
    }

    pub fn gen_shape(&self) -> GridShape {
        self.gen_shape
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.iter().all(Option::is_none)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

fn check_pre_mask(pre_mask: &BinaryMask, shape: GridShape) -> Result<()> {
    if pre_mask.shape() != shape {
        return Err(GraftError::Shape(format!(
            "pre-mask {}x{} vs reference grid {}x{}",
            pre_mask.rows(),
            pre_mask.cols(),
            shape.rows,
            shape.cols
        )));
    }
    Ok(())
}

fn norms_checked(grid: &FeatureGrid, which: &str, mask: Option<&BinaryMask>) -> Result<Vec<f32>> {
    (0..grid.len())
        .map(|i| {
            let n = norm(grid.vector(i));
            let needed = mask.is_none_or(|m| m.get(i));
            if needed && n == 0.0 {
                Err(GraftError::DegenerateFeature(format!("{which} patch {i} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Cosine similarity of every pre-masked reference patch against every
/// generated patch. Rows outside the pre-mask hold [`UNMASKED_SIMILARITY`].
pub fn cosine_sim_matrix(reference: &FeatureGrid, generated: &FeatureGrid, pre_mask: &BinaryMask) -> Result<SimMatrix> {
    if reference.dim() != generated.dim() {
        return Err(GraftError::Shape(format!(
            "feature dims differ: {} vs {}",
            reference.dim(),
            generated.dim()
        )));
    }
    check_pre_mask(pre_mask, reference.shape())?;
    let ref_norms = norms_checked(reference, "reference", Some(pre_mask))?;
    let gen_norms = norms_checked(generated, "generated", None)?;

    let n_gen = generated.len();
    let mut values = vec![UNMASKED_SIMILARITY; reference.len() * n_gen];
    if n_gen > 0 {
        values.par_chunks_mut(n_gen).enumerate().for_each(|(i, row)| {
            if !pre_mask.get(i) {
                return;
            }
            let r = reference.vector(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = dot(r, generated.vector(j)) / (ref_norms[i] * gen_norms[j]);
            }
        });
    }
    Ok(SimMatrix {
        ref_shape: reference.shape(),
        gen_shape: generated.shape(),
        values,
    })
}

/// First index of the maximum; NaN never wins.
fn argmax(values: impl Iterator<Item = (usize, f32)>) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (j, v) in values {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((j, v)),
        }
    }
    best
}

/// Per reference patch, the generated patch of highest similarity
/// (smallest index among ties).
pub fn forward_match(sim: &SimMatrix, pre_mask: &BinaryMask) -> Result<Matching> {
    check_pre_mask(pre_mask, sim.ref_shape)?;
    let mut m = Matching::empty(sim.ref_shape, sim.gen_shape);
    for i in pre_mask.ones_indices() {
        if let Some((j, s)) = argmax(sim.row(i).iter().copied().enumerate()) {
            m.forward[i] = Some(j);
            m.best_sim[i] = s;
        }
    }
    Ok(m)
}

/// Keeps matches whose best similarity reaches `tau`.
pub fn similarity_filter(matching: &Matching, tau: f32) -> BinaryMask {
    let shape = matching.ref_shape;
    let bits = matching
        .forward
        .iter()
        .zip(&matching.best_sim)
        .map(|(f, &s)| f.is_some() && s >= tau)
        .collect();
    BinaryMask::new(shape.rows, shape.cols, bits).expect("matching length equals its shape")
}

fn finish_cycle(
    matching: &mut Matching,
    pre_mask: &BinaryMask,
    delta: f32,
    reverse_of: impl Fn(usize) -> Option<usize>,
) -> Result<BinaryMask> {
    check_pre_mask(pre_mask, matching.ref_shape)?;
    let shape = matching.ref_shape;
    let mut out = BinaryMask::zeros(shape.rows, shape.cols);
    let mut cache: Vec<Option<Option<usize>>> = vec![None; matching.gen_shape.len()];
    for i in pre_mask.ones_indices() {
        let Some(j) = matching.forward[i] else { continue };
        let k = *cache[j].get_or_insert_with(|| reverse_of(j));
        let Some(k) = k else { continue };
        let d = shape.coord(i)?.distance(&shape.coord(k)?);
        matching.reverse[i] = Some(k);
        matching.cycle_dist[i] = Some(d);
        if d <= delta {
            out.set(i, true);
        }
    }
    Ok(out)
}

/// Maps each matched generated patch back to its most similar pre-masked
/// reference patch and keeps the match when the round trip lands within
/// `delta` patches of where it started. Records `reverse` and `cycle_dist`.
pub fn cycle_consistency_filter(
    reference: &FeatureGrid,
    generated: &FeatureGrid,
    matching: &mut Matching,
    pre_mask: &BinaryMask,
    delta: f32,
) -> Result<BinaryMask> {
    if reference.dim() != generated.dim() {
        return Err(GraftError::Shape("feature dims differ".into()));
    }
    let ref_norms = norms_checked(reference, "reference", Some(pre_mask))?;
    let gen_norms = norms_checked(generated, "generated", None)?;
    finish_cycle(matching, pre_mask, delta, |j| {
        let g = generated.vector(j);
        argmax(
            pre_mask
                .ones_indices()
                .map(|k| (k, dot(reference.vector(k), g) / (ref_norms[k] * gen_norms[j]))),
        )
        .map(|(k, _)| k)
    })
}

/// Same result as [`cycle_consistency_filter`], reading the reverse
/// similarities out of an already computed matrix.
pub fn cycle_consistency_filter_from_sim(
    sim: &SimMatrix,
    matching: &mut Matching,
    pre_mask: &BinaryMask,
    delta: f32,
) -> Result<BinaryMask> {
    finish_cycle(matching, pre_mask, delta, |j| {
        argmax(pre_mask.ones_indices().map(|k| (k, sim.get(k, j)))).map(|(k, _)| k)
    })
}

/// `pre ⊙ sim ⊙ consi`.
pub fn final_ref_mask(pre: &BinaryMask, sim: &BinaryMask, consi: &BinaryMask) -> Result<BinaryMask> {
    mask_and(&mask_and(pre, sim)?, consi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSchedule {
    omega: f32,
    rng_seed: u64,
}

impl DropoutSchedule {
    pub fn new(omega: f32, rng_seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(GraftError::Config(format!("dropout intensity {omega} outside [0, 1]")));
        }
        Ok(Self { omega, rng_seed })
    }

    pub fn omega(&self) -> f32 {
        self.omega
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Probability that a patch is dropped at time `t`.
    pub fn drop_probability(&self, t: f32) -> f32 {
        self.omega * t
    }

    /// Derives an independent schedule for another stream (e.g. another block).
    pub fn fork(&self, stream: u64) -> Self {
        Self {
            omega: self.omega,
            rng_seed: splitmix64(self.rng_seed ^ splitmix64(stream.wrapping_add(0x5151))),
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Bernoulli keep-mask with keep probability `1 − ωt`. Deterministic in
/// `(seed, t, shape)`.
pub fn dropout_mask(shape: GridShape, schedule: &DropoutSchedule, t: f32) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GraftError::Domain(format!("timestep {t} outside [0, 1]")));
    }
    let keep = 1.0 - f64::from(schedule.omega) * f64::from(t);
    let mut seed = splitmix64(schedule.rng_seed);
    seed = splitmix64(seed ^ u64::from(t.to_bits()));
    seed = splitmix64(seed ^ ((shape.rows as u64) << 32 | shape.cols as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = (0..shape.len()).map(|_| rng.gen::<f64>() < keep).collect();
    BinaryMask::new(shape.rows, shape.cols, bits)
}

/// `M_ref ⊙ M_drop`.
pub fn apply_dropout(m_ref: &BinaryMask, m_drop: &BinaryMask) -> Result<BinaryMask> {
    mask_and(m_ref, m_drop)
}

/// Everything produced by one matching pass.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub matching: Matching,
    pub sim_mask: BinaryMask,
    pub consi_mask: BinaryMask,
    pub final_mask: BinaryMask,
}

/// Full matching pass: similarity, argmax, both filters, final mask.
pub fn semantic_match(
    reference: &FeatureGrid,
    generated: &FeatureGrid,
    pre_mask: &BinaryMask,
    tau: f32,
    delta: f32,
) -> Result<MatchOutcome> {
    let sim = cosine_sim_matrix(reference, generated, pre_mask)?;
    let mut matching = forward_match(&sim, pre_mask)?;
    let sim_mask = similarity_filter(&matching, tau);
    let consi_mask = cycle_consistency_filter_from_sim(&sim, &mut matching, pre_mask, delta)?;
    let final_mask = final_ref_mask(pre_mask, &sim_mask, &consi_mask)?;
    Ok(MatchOutcome {
        matching,
        sim_mask,
        consi_mask,
        final_mask,
    })
}
