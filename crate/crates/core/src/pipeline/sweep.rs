use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_pipeline_with, GraftConfig, ReferenceSpec, RunOptions};
use crate::collage::SceneSpec;
use crate::error::{GraftError, Result};

pub const SWEEP_COLUMNS: [&str; 5] = ["axis_value", "retained_mean", "retained_min", "align_score", "seed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Tau,
    Delta,
    Omega,
}

impl SweepAxis {
    pub fn apply(&self, base: &GraftConfig, value: f32) -> GraftConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Tau => c.tau = value,
            SweepAxis::Delta => c.delta = value,
            SweepAxis::Omega => c.omega = value,
        }
        c
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tau" => Ok(SweepAxis::Tau),
            "delta" => Ok(SweepAxis::Delta),
            "omega" => Ok(SweepAxis::Omega),
            _ => Err(GraftError::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f32,
    pub retained_mean: f64,
    pub retained_min: usize,
    pub align_score: f32,
    pub seed: u64,
}

/// Runs one pipeline per value, in parallel. Every cell reuses the seeds of
/// `base`; with `out_dir` each cell writes its artifacts to `cell_<k>/`.
pub fn sweep(
    base: &GraftConfig,
    scene: &SceneSpec,
    refs: &[ReferenceSpec],
    axis: SweepAxis,
    values: &[f32],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let configs: Vec<GraftConfig> = values.iter().map(|&v| axis.apply(base, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    configs
        .par_iter()
        .enumerate()
        .map(|(k, config)| {
            let options = RunOptions {
                out_dir: out_dir.map(|d| -> PathBuf { d.join(format!("cell_{k}")) }),
                ..RunOptions::default()
            };
            let report = run_pipeline_with(config, scene, refs, &options)?.report;
            Ok(SweepRow {
                axis_value: values[k],
                retained_mean: report.retained_mean(),
                retained_min: report.retained_min(),
                align_score: report.mean_alignment,
                seed: config.seeds.template,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
