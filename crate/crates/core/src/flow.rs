//! Rectified flow at desk scale.
//!
//! The velocity network is a small stack of [`ToyBlock`]s over text and
//! image tokens. Its output is the closed-form straight-path velocity for a
//! Gaussian data family centred on the condition's mean, plus a coupling
//! term `κ (x - c)` where `c` is the image content read back out of the
//! final block. Without grafting `c` stays close to a local average of `x`;
//! grafted reference keys/values pull `c`, and through it the trajectory,
//! toward the reference.
//!
//! Time runs from `t = 0` (data) to `t = 1` (noise) on a uniform grid of
//! `steps` intervals. Interval `k` spans `[k/steps, (k+1)/steps]` and is keyed
//! by its midpoint; inversion records one [`TrajectoryEntry`] per interval
//! and generation looks entries up by that exact key.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{build_rope_with_theta, BlockInput, BlockRecord, GraftAction, Matrix, ToyBlock};
use crate::error::{GraftError, Result};
use crate::grid::{FeatureGrid, GridShape, PATCH_DIM};
use crate::io::{read_features, write_features};
use crate::matching::splitmix64;

pub const DEFAULT_STEPS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepperKind {
    Euler,
    #[default]
    Midpoint,
}

impl std::str::FromStr for StepperKind {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(StepperKind::Euler),
            "midpoint" => Ok(StepperKind::Midpoint),
            other => Err(GraftError::Config(format!("unknown stepper `{other}`"))),
        }
    }
}

/// Fixed hyperparameters of the toy velocity network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub n_txt: usize,
    pub blocks: usize,
    /// Scale of the latent-to-token lift; sets attention sharpness.
    pub gain: f32,
    /// Strength of the pull toward the attended content.
    pub coupling: f32,
    pub rope_theta: f32,
    /// Norm of each text-token embedding relative to `gain`.
    pub text_scale: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: 16,
            n_txt: 8,
            blocks: 2,
            gain: 4.0,
            coupling: 1.0,
            rope_theta: crate::attention::DEFAULT_ROPE_THETA,
            text_scale: 1.0,
            seed: 0x7e57_f10e,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || !self.head_dim.is_multiple_of(4) {
            return Err(GraftError::Config(format!(
                "{} heads of dim {} (dim must be a positive multiple of 4)",
                self.heads, self.head_dim
            )));
        }
        if self.width() < PATCH_DIM {
            return Err(GraftError::Config(format!("token width {} below patch dim {PATCH_DIM}", self.width())));
        }
        for (name, v) in [("gain", self.gain), ("coupling", self.coupling), ("text_scale", self.text_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(GraftError::Config(format!("{name} = {v}")));
            }
        }
        if self.gain == 0.0 {
            return Err(GraftError::Config("gain must be positive".into()));
        }
        Ok(())
    }
}

/// Prompt conditioning: the mean and spread of the Gaussian data family the
/// closed-form velocity targets, and the text-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    mean: FeatureGrid,
    sigma: f32,
    text: Vec<f32>,
}

impl Condition {
    pub fn new(mean: FeatureGrid, sigma: f32, text: Vec<f32>) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(GraftError::Config(format!("condition sigma {sigma} must be positive")));
        }
        if mean.dim() != PATCH_DIM {
            return Err(GraftError::Shape(format!("condition mean dim {} != {PATCH_DIM}", mean.dim())));
        }
        if text.iter().any(|v| !v.is_finite()) {
            return Err(GraftError::Numerical("text embedding".into()));
        }
        Ok(Self { mean, sigma, text })
    }

    /// Zero-mean, unit-spread condition: data and noise share a distribution.
    pub fn unconditional(shape: GridShape, text: Vec<f32>) -> Result<Self> {
        Self::new(FeatureGrid::zeros(shape.rows, shape.cols, PATCH_DIM), 1.0, text)
    }

    pub fn mean(&self) -> &FeatureGrid {
        &self.mean
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn text(&self) -> &[f32] {
        &self.text
    }

    pub fn shape(&self) -> GridShape {
        self.mean.shape()
    }
}

/// Seeded text-token embeddings. Token ids beyond `n_txt` are dropped and
/// missing positions use padding id 0, so an empty id list is the null prompt.
pub fn text_embedding(token_ids: &[u64], config: &ModelConfig, seed: u64) -> Vec<f32> {
    let width = config.width();
    let norm = config.text_scale * config.gain;
    let mut out = Vec::with_capacity(config.n_txt * width);
    for pos in 0..config.n_txt {
        let id = token_ids.get(pos).copied().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(id.wrapping_add(pos as u64 * 0x9e37))));
        let v: Vec<f32> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        out.extend(v.iter().map(|x| x / n * norm));
    }
    out
}

/// A latent and its normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub latent: FeatureGrid,
    pub t: f32,
}

impl FlowState {
    pub fn new(latent: FeatureGrid, t: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(GraftError::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(Self { latent, t })
    }
}

fn axpy(x: &FeatureGrid, a: f32, v: &FeatureGrid) -> Result<FeatureGrid> {
    if x.shape() != v.shape() || x.dim() != v.dim() {
        return Err(GraftError::Shape("state and velocity shapes differ".into()));
    }
    let data = x.data().iter().zip(v.data()).map(|(x, v)| x + a * v).collect();
    FeatureGrid::new(x.rows(), x.cols(), x.dim(), data)
}

/// `x ← x + dt·v`.
pub fn step_euler(state: &FlowState, velocity: &FeatureGrid, dt: f32) -> Result<FlowState> {
    if dt.abs() > 1.0 {
        return Err(GraftError::Domain(format!("|dt| = {} exceeds 1", dt.abs())));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    Ok(FlowState {
        latent: axpy(&state.latent, dt, velocity)?,
        t: (state.t + dt).clamp(0.0, 1.0),
    })
}

/// `x ← x + dt·v(x + dt/2·v(x, t), t + dt/2)`.
pub fn step_midpoint(
    state: &FlowState,
    mut velocity: impl FnMut(&FeatureGrid, f32) -> Result<FeatureGrid>,
    dt: f32,
) -> Result<FlowState> {
    if dt.abs() > 1.0 {
        return Err(GraftError::Domain(format!("|dt| = {} exceeds 1", dt.abs())));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let v0 = velocity(&state.latent, state.t)?;
    let mid = axpy(&state.latent, 0.5 * dt, &v0)?;
    let v1 = velocity(&mid, state.t + 0.5 * dt)?;
    Ok(FlowState {
        latent: axpy(&state.latent, dt, &v1)?,
        t: (state.t + dt).clamp(0.0, 1.0),
    })
}

/// Time key of interval `k` of `steps`: its midpoint.
pub fn interval_key(k: usize, steps: usize) -> f32 {
    ((2 * k + 1) as f64 / (2 * steps) as f64) as f32
}

fn grid_time(k: usize, steps: usize) -> f32 {
    (k as f64 / steps as f64) as f32
}

/// Where a hook is being consulted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HookPoint {
    /// Generation step, counting from 0 at `t = 1`.
    pub step: usize,
    /// Interval key shared with the inversion trajectory.
    pub t: f32,
    pub block: usize,
}

/// Per-(step, block) grafting decisions during generation. Consulted once
/// per step at the evaluation that inversion records (the midpoint stage for
/// the midpoint stepper).
pub trait GraftHook {
    fn graft(&mut self, at: HookPoint, block_input: &FeatureGrid) -> Result<GraftAction>;

    /// Whether to hand the block's softmax weights to [`GraftHook::attention`].
    fn wants_attention(&self, _at: HookPoint) -> bool {
        false
    }

    /// Receives the `heads × n_tokens × n_keys` softmax weights.
    fn attention(&mut self, _at: HookPoint, _probs: FeatureGrid) {}
}

/// A hook that never grafts.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoGraft;

impl GraftHook for NoGraft {
    fn graft(&mut self, _: HookPoint, _: &FeatureGrid) -> Result<GraftAction> {
        Ok(GraftAction::None)
    }
}

/// Everything recorded for one inversion interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    pub t: f32,
    /// Latent at the start of the interval.
    pub latent: FeatureGrid,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub steps: usize,
    pub stepper: StepperKind,
    pub entries: Vec<TrajectoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    steps: usize,
    stepper: StepperKind,
    rows: usize,
    cols: usize,
    latent_dim: usize,
    feature_dim: usize,
    blocks: usize,
    #[serde(default)]
    seeds: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    t: f32,
    latent: String,
    blocks: Vec<[String; 3]>,
}

impl FlowTrajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The entry recorded at exactly `t`.
    pub fn entry_at(&self, t: f32) -> Result<&TrajectoryEntry> {
        self.entries
            .iter()
            .find(|e| e.t.to_bits() == t.to_bits())
            .ok_or(GraftError::TrajectoryMismatch(t))
    }

    /// Writes one FGRD file per recorded tensor plus `manifest.json`.
    pub fn save(&self, dir: &Path, seeds: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let first = self.entries.first();
        let mut manifest = Manifest {
            steps: self.steps,
            stepper: self.stepper,
            rows: first.map_or(0, |e| e.latent.rows()),
            cols: first.map_or(0, |e| e.latent.cols()),
            latent_dim: first.map_or(0, |e| e.latent.dim()),
            feature_dim: first.and_then(|e| e.blocks.first()).map_or(0, |b| b.input.dim()),
            blocks: first.map_or(0, |e| e.blocks.len()),
            seeds,
            entries: Vec::new(),
        };
        for (k, e) in self.entries.iter().enumerate() {
            let latent = format!("step{k:03}_latent.fgrd");
            write_features(&dir.join(&latent), &e.latent)?;
            let mut blocks = Vec::new();
            for (b, rec) in e.blocks.iter().enumerate() {
                let names = [
                    format!("step{k:03}_block{b}_input.fgrd"),
                    format!("step{k:03}_block{b}_keys.fgrd"),
                    format!("step{k:03}_block{b}_values.fgrd"),
                ];
                write_features(&dir.join(&names[0]), &rec.input)?;
                write_features(&dir.join(&names[1]), &rec.keys)?;
                write_features(&dir.join(&names[2]), &rec.values)?;
                blocks.push(names);
            }
            manifest.entries.push(ManifestEntry { t: e.t, latent, blocks });
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let mut blocks = Vec::new();
            for [input, keys, values] in &e.blocks {
                blocks.push(BlockRecord {
                    input: read_features(&dir.join(input))?,
                    keys: read_features(&dir.join(keys))?,
                    values: read_features(&dir.join(values))?,
                });
            }
            entries.push(TrajectoryEntry {
                t: e.t,
                latent: read_features(&dir.join(&e.latent))?,
                blocks,
            });
        }
        Ok(Self {
            steps: manifest.steps,
            stepper: manifest.stepper,
            entries,
        })
    }
}

/// Result of a generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// The `t = 0` latent.
    pub latent: FeatureGrid,
    /// Latent after each step, `steps` entries ending with `latent`.
    pub states: Vec<FeatureGrid>,
}

/// The fixed-weight velocity network.
#[derive(Debug)]
pub struct ToyFlowModel {
    config: ModelConfig,
    lift: Matrix,
    blocks: Vec<ToyBlock>,
    inversions: AtomicUsize,
}

impl Clone for ToyFlowModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            lift: self.lift.clone(),
            blocks: self.blocks.clone(),
            inversions: AtomicUsize::new(self.inversion_count()),
        }
    }
}

impl ToyFlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let lift = Matrix::orthonormal_columns(config.width(), PATCH_DIM, splitmix64(config.seed))?;
        let blocks = (0..config.blocks)
            .map(|b| ToyBlock::new(config.heads, config.head_dim, splitmix64(config.seed ^ (b as u64 + 1) << 20)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            lift,
            blocks,
            inversions: AtomicUsize::new(0),
        })
    }

    /// A model whose block projections are all zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config)?;
        let (h, d) = (model.config.heads, model.config.head_dim);
        model.blocks.iter_mut().for_each(|b| *b = ToyBlock::zeroed(h, d));
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of [`ToyFlowModel::invert`] calls made on this model.
    pub fn inversion_count(&self) -> usize {
        self.inversions.load(Ordering::SeqCst)
    }

    pub fn condition(&self, mean: FeatureGrid, sigma: f32, token_ids: &[u64], seed: u64) -> Result<Condition> {
        Condition::new(mean, sigma, text_embedding(token_ids, &self.config, seed))
    }

    pub fn null_condition(&self, shape: GridShape, seed: u64) -> Result<Condition> {
        Condition::unconditional(shape, text_embedding(&[], &self.config, seed))
    }

    fn check(&self, x: &FeatureGrid, cond: &Condition) -> Result<()> {
        if x.dim() != PATCH_DIM {
            return Err(GraftError::Shape(format!("latent dim {} != {PATCH_DIM}", x.dim())));
        }
        if x.shape() != cond.shape() {
            return Err(GraftError::Shape(format!(
                "latent grid {}x{} vs condition grid {}x{}",
                x.rows(),
                x.cols(),
                cond.shape().rows,
                cond.shape().cols
            )));
        }
        if cond.text.len() != self.config.n_txt * self.config.width() {
            return Err(GraftError::Shape("text embedding does not match the model".into()));
        }
        Ok(())
    }

    /// Closed-form velocity `E[ε - x₀ | x_t = x]` for `x₀ ~ N(mean, σ²)` and
    /// `ε ~ N(0, 1)`, elementwise.
    pub fn base_velocity(x: &FeatureGrid, t: f32, cond: &Condition) -> Result<FeatureGrid> {
        let sigma2 = cond.sigma * cond.sigma;
        let s2 = (1.0 - t) * (1.0 - t) * sigma2 + t * t;
        let alpha = (t - (1.0 - t) * sigma2) / s2;
        let data = x
            .data()
            .iter()
            .zip(cond.mean.data())
            .map(|(&x, &mu)| alpha * (x - (1.0 - t) * mu) - mu)
            .collect();
        FeatureGrid::new(x.rows(), x.cols(), x.dim(), data)
    }

    /// Velocity with no grafting.
    pub fn velocity(&self, state: &FlowState, cond: &Condition) -> Result<FeatureGrid> {
        Ok(self.evaluate(&state.latent, state.t, cond, None, false)?.0)
    }

    /// One network evaluation. `hook` is consulted per block with the block's
    /// image-token input; `record` returns what each block saw.
    pub fn evaluate(
        &self,
        x: &FeatureGrid,
        t: f32,
        cond: &Condition,
        mut hook: Option<(&mut dyn GraftHook, usize, f32)>,
        record: bool,
    ) -> Result<(FeatureGrid, Vec<BlockRecord>)> {
        self.check(x, cond)?;
        let cfg = &self.config;
        let width = cfg.width();
        let grid = x.shape();
        let rope = build_rope_with_theta(grid.rows, grid.cols, cfg.n_txt, cfg.head_dim, cfg.rope_theta)?;

        let mut tokens = Vec::with_capacity((cfg.n_txt + grid.len()) * width);
        tokens.extend_from_slice(&cond.text);
        let mut lifted = vec![0.0f32; width];
        for j in 0..grid.len() {
            self.lift.apply(x.vector(j), &mut lifted);
            tokens.extend(lifted.iter().map(|v| v * cfg.gain));
        }
        let mut input = BlockInput::new(cfg.n_txt, grid, width, tokens)?;

        let mut records = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let (action, keep_probs, at) = match hook.as_mut() {
                Some((h, step, key)) => {
                    let at = HookPoint {
                        step: *step,
                        t: *key,
                        block: b,
                    };
                    (h.graft(at, &input.image_features())?, h.wants_attention(at), Some(at))
                }
                None => (GraftAction::None, false, None),
            };
            let out = block.forward_full(&input, &rope, &action, record, keep_probs)?;
            if let (Some((h, _, _)), Some(at), Some(probs)) = (hook.as_mut(), at, out.probs) {
                h.attention(at, probs);
            }
            records.extend(out.record);
            input = out.next;
        }

        let base = Self::base_velocity(x, t, cond)?;
        let start = cfg.n_txt * width;
        let mut content = vec![0.0f32; PATCH_DIM];
        let mut v = base.into_data();
        for j in 0..grid.len() {
            self.lift.apply_transposed(&input.tokens[start + j * width..start + (j + 1) * width], &mut content);
            let xj = x.vector(j);
            for d in 0..PATCH_DIM {
                let c = content[d] / cfg.gain;
                v[j * PATCH_DIM + d] += cfg.coupling * (xj[d] - c);
            }
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(GraftError::Numerical(format!("velocity at t = {t}")));
        }
        Ok((FeatureGrid::new(grid.rows, grid.cols, PATCH_DIM, v)?, records))
    }

    /// Integrates from `t = 0` to `t = 1`, recording every interval.
    pub fn invert(
        &self,
        image: &FeatureGrid,
        cond: &Condition,
        steps: usize,
        stepper: StepperKind,
    ) -> Result<(FeatureGrid, FlowTrajectory)> {
        if steps == 0 {
            return Err(GraftError::Config("steps must be at least 1".into()));
        }
        self.inversions.fetch_add(1, Ordering::SeqCst);
        let dt = (1.0 / steps as f64) as f32;
        let mut x = image.clone();
        let mut entries = Vec::with_capacity(steps);
        for k in 0..steps {
            let t0 = grid_time(k, steps);
            let key = interval_key(k, steps);
            let (next, blocks) = match stepper {
                StepperKind::Euler => {
                    let (v, rec) = self.evaluate(&x, t0, cond, None, true)?;
                    (axpy(&x, dt, &v)?, rec)
                }
                StepperKind::Midpoint => {
                    let (v0, _) = self.evaluate(&x, t0, cond, None, false)?;
                    let mid = axpy(&x, 0.5 * dt, &v0)?;
                    let (v1, rec) = self.evaluate(&mid, key, cond, None, true)?;
                    (axpy(&x, dt, &v1)?, rec)
                }
            };
            entries.push(TrajectoryEntry {
                t: key,
                latent: x,
                blocks,
            });
            x = next;
        }
        Ok((
            x,
            FlowTrajectory {
                steps,
                stepper,
                entries,
            },
        ))
    }

    /// Integrates from `t = 1` to `t = 0`, consulting `hook` once per step
    /// and block.
    pub fn generate(
        &self,
        init: &FeatureGrid,
        cond: &Condition,
        steps: usize,
        stepper: StepperKind,
        hook: &mut dyn GraftHook,
    ) -> Result<Generation> {
        if steps == 0 {
            return Err(GraftError::Config("steps must be at least 1".into()));
        }
        let dt = -((1.0 / steps as f64) as f32);
        let mut x = init.clone();
        let mut states = Vec::with_capacity(steps);
        for (step, k) in (0..steps).rev().enumerate() {
            let t0 = grid_time(k + 1, steps);
            let key = interval_key(k, steps);
            x = match stepper {
                StepperKind::Euler => {
                    let (v, _) = self.evaluate(&x, t0, cond, Some((&mut *hook, step, key)), false)?;
                    axpy(&x, dt, &v)?
                }
                StepperKind::Midpoint => {
                    let (v0, _) = self.evaluate(&x, t0, cond, None, false)?;
                    let mid = axpy(&x, 0.5 * dt, &v0)?;
                    let (v1, _) = self.evaluate(&mid, key, cond, Some((&mut *hook, step, key)), false)?;
                    axpy(&x, dt, &v1)?
                }
            };
            states.push(x.clone());
        }
        Ok(Generation { latent: x, states })
    }
}
