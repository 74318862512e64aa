//! End-to-end runs: collage, inversion, grafted generation, scoring.
//!
//! A run renders the template scene, pastes each reference subject into it,
//! inverts the collage once under the null prompt, then generates under the
//! scene prompt from the inverted noise while [`GraftingHook`] grafts the
//! recorded reference keys/values at every (step, block).

mod eval;
mod hook;
pub mod scenarios;
mod sweep;
mod viz;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use eval::{eval_alignment, ALIGN_SEARCH};
pub use hook::{GraftingHook, Snapshot, StepCounts};
pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepRow, SWEEP_COLUMNS};
pub use viz::{match_viz, VIZ_GAP, VIZ_SCALE};

use crate::collage::{build_collage, render_scene, Collage, ExactStages, Reference, SceneSpec, SceneStages};
use crate::error::{GraftError, Result};
use crate::flow::{FlowTrajectory, ModelConfig, StepperKind, ToyFlowModel, DEFAULT_STEPS};
use crate::grid::{FeatureGrid, PixelImage, PATCH_DIM};
use crate::io::{write_features, write_png};
use crate::matching::{DropoutSchedule, DEFAULT_DELTA, DEFAULT_OMEGA, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Gaussian initial noise; grafting stays on.
    NoInit,
    /// Inverted initial noise; nothing grafted.
    NoGraft,
    /// All pre-masked reference rows appended at their own positions.
    NoMatch,
    /// Matched generated features overwritten instead of fused.
    Replace,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoInit,
        Variant::NoGraft,
        Variant::NoMatch,
        Variant::Replace,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoInit => "no-init",
            Variant::NoGraft => "no-graft",
            Variant::NoMatch => "no-match",
            Variant::Replace => "replace",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| GraftError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Renders the template and reference scenes.
    pub template: u64,
    /// Seeds the null-prompt embedding used for inversion.
    pub inversion: u64,
    /// Seeds the Gaussian initial noise of the no-init variant.
    pub generation: u64,
    /// Seeds feature dropout.
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::derive(0)
    }
}

impl Seeds {
    /// Four distinct seeds from one.
    pub fn derive(seed: u64) -> Self {
        use crate::matching::splitmix64;
        Self {
            template: splitmix64(seed ^ 1),
            inversion: splitmix64(seed ^ 2),
            generation: splitmix64(seed ^ 3),
            dropout: splitmix64(seed ^ 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftConfig {
    pub tau: f32,
    pub delta: f32,
    pub omega: f32,
    pub steps: usize,
    pub stepper: StepperKind,
    /// Blocks that graft; `None` hooks every block.
    pub hooked_blocks: Option<Vec<usize>>,
    pub seeds: Seeds,
    pub variant: Variant,
    /// Spread of the prompt-conditioned data family around the template.
    pub prompt_sigma: f32,
    pub model: ModelConfig,
}

pub const DEFAULT_PROMPT_SIGMA: f32 = 0.5;

impl Default for GraftConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            delta: DEFAULT_DELTA,
            omega: DEFAULT_OMEGA,
            steps: DEFAULT_STEPS,
            stepper: StepperKind::Midpoint,
            hooked_blocks: None,
            seeds: Seeds::default(),
            variant: Variant::Full,
            prompt_sigma: DEFAULT_PROMPT_SIGMA,
            model: ModelConfig::default(),
        }
    }
}

impl GraftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(GraftError::Config(format!("tau {} outside [-1, 1]", self.tau)));
        }
        if !(self.delta >= 0.0) {
            return Err(GraftError::Config(format!("delta {} must be non-negative", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(GraftError::Config(format!("omega {} outside [0, 1]", self.omega)));
        }
        if self.steps == 0 {
            return Err(GraftError::Config("steps must be at least 1".into()));
        }
        if !(self.prompt_sigma > 0.0 && self.prompt_sigma.is_finite()) {
            return Err(GraftError::Config(format!("prompt sigma {} must be positive", self.prompt_sigma)));
        }
        self.model.validate()?;
        if let Some(blocks) = &self.hooked_blocks {
            if let Some(b) = blocks.iter().find(|&&b| b >= self.model.blocks) {
                return Err(GraftError::Config(format!("hooked block {b} >= {} blocks", self.model.blocks)));
            }
        }
        Ok(())
    }

    pub fn hooked(&self) -> Vec<usize> {
        let mut blocks = self.hooked_blocks.clone().unwrap_or_else(|| (0..self.model.blocks).collect());
        blocks.sort_unstable();
        blocks.dedup();
        blocks
    }
}

/// A reference image given by the scene that renders it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub scene: SceneSpec,
    pub subject: String,
}

impl ReferenceSpec {
    /// Uses `subject`, or the scene's first subject when `None`.
    pub fn from_scene(scene: SceneSpec, subject: Option<&str>) -> Result<Self> {
        let subject = match subject {
            Some(s) => s.to_string(),
            None => scene
                .subjects
                .first()
                .map(|s| s.id.clone())
                .ok_or_else(|| GraftError::Spec("reference scene has no subjects".into()))?,
        };
        Ok(Self { scene, subject })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject: String,
    pub alignment: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub collage_ms: f64,
    pub inversion_ms: f64,
    pub generation_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: GraftConfig,
    pub pre_mask_popcount: usize,
    /// Mask sizes per (step, block), step-major.
    pub counts: Vec<StepCounts>,
    /// Retained rows per (step, block); `steps × hooked blocks` entries.
    pub retained_popcounts: Vec<usize>,
    pub alignment: Vec<SubjectScore>,
    pub mean_alignment: f32,
    pub invert_calls: usize,
    /// FNV-1a of the initial noise bits.
    pub init_digest: u64,
    pub timings: Timings,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn retained_mean(&self) -> f64 {
        if self.retained_popcounts.is_empty() {
            return 0.0;
        }
        self.retained_popcounts.iter().sum::<usize>() as f64 / self.retained_popcounts.len() as f64
    }

    pub fn retained_min(&self) -> usize {
        self.retained_popcounts.iter().copied().min().unwrap_or(0)
    }
}

/// Optional side outputs of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write `generated.png`, `collage.png` and `report.json` here.
    pub out_dir: Option<PathBuf>,
    /// Also write every collage stage image.
    pub dump_stages: bool,
    /// Save the inversion trajectory here.
    pub record_dir: Option<PathBuf>,
    /// Write softmax weights per (step, block) under `out_dir/attention`.
    pub dump_attention: bool,
    /// Keep the matching at this (generation step, block).
    pub capture: Option<(usize, usize)>,
    /// Pad grounding boxes by this many pixels.
    pub dilate_grounding: usize,
}

pub struct PipelineOutput {
    pub report: RunReport,
    pub image: PixelImage,
    pub collage: Collage,
    pub init: FeatureGrid,
    pub trajectory: FlowTrajectory,
    pub snapshot: Option<Snapshot>,
}

fn digest(grid: &FeatureGrid) -> u64 {
    grid.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        v.to_bits()
            .to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    })
}

/// Standard-normal latent from `seed`.
pub fn gaussian_latent(rows: usize, cols: usize, seed: u64) -> Result<FeatureGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols * PATCH_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureGrid::new(rows, cols, PATCH_DIM, data)
}

fn stages_for(spec: &SceneSpec, seed: u64, dilate: usize) -> Box<dyn SceneStages> {
    let exact = ExactStages::new(spec.clone(), seed);
    if dilate == 0 {
        Box::new(exact)
    } else {
        Box::new(crate::collage::DilatedGrounding {
            inner: exact,
            pixels: dilate,
        })
    }
}

/// Builds the collage for `scene` and `refs` with exact (or padded) stages.
pub fn collage_for(config: &GraftConfig, scene: &SceneSpec, refs: &[ReferenceSpec], dilate: usize) -> Result<Collage> {
    let seed = config.seeds.template;
    let template = render_scene(scene, seed).map_err(|e| e.in_stage("template", "scene"))?;
    let template_stages = stages_for(scene, seed, dilate);
    let ref_stages: Vec<Box<dyn SceneStages>> = refs.iter().map(|r| stages_for(&r.scene, seed, dilate)).collect();
    let mut references = Vec::with_capacity(refs.len());
    for (r, stages) in refs.iter().zip(&ref_stages) {
        references.push(Reference {
            image: render_scene(&r.scene, seed).map_err(|e| e.in_stage("render reference", &r.subject))?,
            subject: r.subject.clone(),
            stages: stages.as_ref(),
        });
    }
    build_collage(&template, template_stages.as_ref(), &references)
}

pub fn run_pipeline(config: &GraftConfig, scene: &SceneSpec, refs: &[ReferenceSpec]) -> Result<PipelineOutput> {
    run_pipeline_with(config, scene, refs, &RunOptions::default())
}

pub fn run_pipeline_with(
    config: &GraftConfig,
    scene: &SceneSpec,
    refs: &[ReferenceSpec],
    options: &RunOptions,
) -> Result<PipelineOutput> {
    config.validate()?;
    scene.validate()?;
    let started = Instant::now();
    let mut timings = Timings::default();

    let collage = collage_for(config, scene, refs, options.dilate_grounding)?;
    timings.collage_ms = started.elapsed().as_secs_f64() * 1e3;

    let model = ToyFlowModel::new(config.model.clone())?;
    let x = collage.image.to_latent();
    let shape = x.shape();
    let null = model.null_condition(shape, config.seeds.inversion)?;
    let prompt = model.condition(
        collage.template.to_latent(),
        config.prompt_sigma,
        &scene.token_ids(),
        config.seeds.template,
    )?;

    let t0 = Instant::now();
    let (inverted, trajectory) = model
        .invert(&x, &null, config.steps, config.stepper)
        .map_err(|e| e.in_stage("invert", "collage"))?;
    timings.inversion_ms = t0.elapsed().as_secs_f64() * 1e3;

    let init = match config.variant {
        Variant::NoInit => gaussian_latent(shape.rows, shape.cols, config.seeds.generation)?,
        _ => inverted,
    };

    let hooked = config.hooked();
    let dropout = DropoutSchedule::new(config.omega, config.seeds.dropout)?;
    let mut hook = GraftingHook::new(
        &trajectory,
        &collage.pre_mask,
        config.variant,
        config.tau,
        config.delta,
        dropout,
        model.n_blocks(),
        &hooked,
    )
    .with_attention_dump(options.dump_attention && options.out_dir.is_some());
    if let Some((step, block)) = options.capture {
        hook = hook.capture(step, block);
    }

    let t1 = Instant::now();
    let generation = model
        .generate(&init, &prompt, config.steps, config.stepper, &mut hook)
        .map_err(|e| e.in_stage("generate", "scene"))?;
    timings.generation_ms = t1.elapsed().as_secs_f64() * 1e3;
    let image = PixelImage::from_latent(&generation.latent)?;

    let alignment: Vec<SubjectScore> = collage
        .subjects
        .iter()
        .map(|s| SubjectScore {
            subject: s.id.clone(),
            alignment: eval_alignment(&image, &s.sprite, &s.pixel_mask),
        })
        .collect();
    let mean_alignment = if alignment.is_empty() {
        0.0
    } else {
        alignment.iter().map(|s| s.alignment).sum::<f32>() / alignment.len() as f32
    };
    timings.total_ms = started.elapsed().as_secs_f64() * 1e3;

    let counts = std::mem::take(&mut hook.counts);
    let snapshot = hook.snapshot.take();
    let attention = std::mem::take(&mut hook.attention);
    let mut report = RunReport {
        config: config.clone(),
        pre_mask_popcount: collage.pre_mask.popcount(),
        retained_popcounts: counts.iter().map(|c| c.retained).collect(),
        counts,
        alignment,
        mean_alignment,
        invert_calls: model.inversion_count(),
        init_digest: digest(&init),
        timings,
        artifacts: Vec::new(),
    };

    if let Some(dir) = &options.record_dir {
        trajectory.save(dir, serde_json::to_value(config.seeds)?)?;
        report.artifacts.push(dir.join("manifest.json"));
    }
    if let Some(dir) = &options.out_dir {
        write_artifacts(dir, &image, &collage, &attention, options, &mut report)?;
    }

    Ok(PipelineOutput {
        report,
        image,
        collage,
        init,
        trajectory,
        snapshot,
    })
}

fn write_artifacts(
    dir: &Path,
    image: &PixelImage,
    collage: &Collage,
    attention: &[(crate::flow::HookPoint, FeatureGrid)],
    options: &RunOptions,
    report: &mut RunReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let push_png = |name: &str, img: &PixelImage, report: &mut RunReport| -> Result<()> {
        let path = dir.join(name);
        write_png(&path, img)?;
        report.artifacts.push(path);
        Ok(())
    };
    push_png("generated.png", image, report)?;
    push_png("collage.png", &collage.image, report)?;
    if options.dump_stages {
        for (k, (name, img)) in collage.stages.iter().enumerate() {
            push_png(&format!("stage{k:02}_{name}.png"), img, report)?;
        }
    }
    if !attention.is_empty() {
        let adir = dir.join("attention");
        std::fs::create_dir_all(&adir)?;
        for (at, probs) in attention {
            let path = adir.join(format!("step{:03}_block{}.fgrd", at.step, at.block));
            write_features(&path, probs)?;
            report.artifacts.push(path);
        }
    }
    let report_path = dir.join("report.json");
    report.artifacts.push(report_path.clone());
    std::fs::write(&report_path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::NoGraft;

    fn small() -> (GraftConfig, SceneSpec, Vec<ReferenceSpec>) {
        let (scene, reference) = scenarios::translated_subject(3);
        let config = GraftConfig {
            steps: 6,
            seeds: Seeds::derive(3),
            ..GraftConfig::default()
        };
        (config, scene, vec![reference])
    }

    #[test]
    fn config_validation() {
        let mut c = GraftConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 1.5;
        assert!(c.validate().unwrap_err().is_config());
        c = GraftConfig {
            omega: -0.1,
            ..GraftConfig::default()
        };
        assert!(c.validate().is_err());
        c = GraftConfig {
            steps: 0,
            ..GraftConfig::default()
        };
        assert!(c.validate().is_err());
        c = GraftConfig {
            hooked_blocks: Some(vec![5]),
            ..GraftConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!("no-match".parse::<Variant>().unwrap(), Variant::NoMatch);
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn report_shape_and_bounds() {
        let (config, scene, refs) = small();
        let out = run_pipeline(&config, &scene, &refs).unwrap();
        let r = &out.report;
        assert_eq!(r.retained_popcounts.len(), config.steps * config.model.blocks);
        assert!(r.retained_popcounts.iter().all(|&c| c <= r.pre_mask_popcount));
        assert!(r.counts.iter().all(|c| c.retained <= c.final_mask && c.final_mask <= c.pre));
        assert_eq!(r.invert_calls, 1);
        assert!((0.0..=1.0).contains(&r.mean_alignment));
    }

    #[test]
    fn no_graft_equals_plain_generation() {
        let (mut config, scene, refs) = small();
        config.variant = Variant::NoGraft;
        let out = run_pipeline(&config, &scene, &refs).unwrap();
        let model = ToyFlowModel::new(config.model.clone()).unwrap();
        let prompt = model
            .condition(out.collage.template.to_latent(), config.prompt_sigma, &scene.token_ids(), config.seeds.template)
            .unwrap();
        let plain = model.generate(&out.init, &prompt, config.steps, config.stepper, &mut NoGraft).unwrap();
        assert_eq!(PixelImage::from_latent(&plain.latent).unwrap(), out.image);
    }

    #[test]
    fn variants_share_inputs() {
        let (config, scene, refs) = small();
        let run = |variant| {
            let c = GraftConfig {
                variant,
                ..config.clone()
            };
            run_pipeline(&c, &scene, &refs).unwrap().report
        };
        let full = run(Variant::Full);
        let no_match = run(Variant::NoMatch);
        let no_graft = run(Variant::NoGraft);
        let no_init = run(Variant::NoInit);
        assert_eq!(full.init_digest, no_match.init_digest);
        assert_eq!(full.init_digest, no_graft.init_digest);
        assert_ne!(full.init_digest, no_init.init_digest);
        assert!(no_graft.retained_popcounts.iter().all(|&c| c == 0));
    }

    #[test]
    fn artifacts_are_written() {
        let (config, scene, refs) = small();
        let dir = tempfile::tempdir().unwrap();
        let options = RunOptions {
            out_dir: Some(dir.path().join("out")),
            dump_stages: true,
            record_dir: Some(dir.path().join("traj")),
            dump_attention: true,
            ..RunOptions::default()
        };
        let out = run_pipeline_with(&config, &scene, &refs, &options).unwrap();
        for p in &out.report.artifacts {
            assert!(p.exists(), "{p:?}");
        }
        assert!(dir.path().join("out/generated.png").exists());
        assert!(dir.path().join("out/attention/step000_block0.fgrd").exists());
        let back = FlowTrajectory::load(&dir.path().join("traj")).unwrap();
        assert_eq!(back, out.trajectory);
    }
}
