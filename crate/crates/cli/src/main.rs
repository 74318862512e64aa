use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featgraft::collage::SceneSpec;
use featgraft::flow::StepperKind;
use featgraft::io::read_png;
use featgraft::pipeline::{
    collage_for, eval_alignment, match_viz, run_pipeline_with, scenarios, sweep, write_sweep_csv, GraftConfig,
    ReferenceSpec, RunOptions, Seeds, SweepAxis, Variant,
};
use featgraft::{GraftError, Result};

#[derive(Parser, Debug)]
#[command(name = "featgraft", version, about = "Graft reference subjects into generated scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the collage, invert it once and generate with grafting.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Write generated.png, collage.png and report.json here.
        #[arg(long)]
        out: PathBuf,
        /// Also write every collage stage image.
        #[arg(long)]
        dump_stages: bool,
        /// Save the inversion trajectory (FGRD files plus manifest.json).
        #[arg(long)]
        record_dir: Option<PathBuf>,
        /// Write per-(step, block) softmax weights under <out>/attention.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Draw the retained matches at one (step, block) as SVG.
    MatchViz {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 12)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one pipeline per value of a threshold and write a CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// tau, delta or omega.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f32>,
        #[arg(long)]
        out: PathBuf,
        /// Keep each cell's artifacts under this directory.
        #[arg(long)]
        cells_dir: Option<PathBuf>,
    },
    /// Score a generated image against the pasted reference subjects.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Generated PNG to score.
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Template scene JSON.
    #[arg(long, conflicts_with = "demo")]
    scene: Option<PathBuf>,
    /// Reference scene JSON, optionally `path:subject`. Repeatable.
    #[arg(long = "ref")]
    refs: Vec<String>,
    /// Use the built-in translated-subject scene with this seed.
    #[arg(long)]
    demo: Option<u64>,
    #[arg(long, default_value_t = featgraft::matching::DEFAULT_TAU, allow_hyphen_values = true)]
    tau: f32,
    #[arg(long, default_value_t = featgraft::matching::DEFAULT_DELTA)]
    delta: f32,
    #[arg(long, default_value_t = featgraft::matching::DEFAULT_OMEGA)]
    omega: f32,
    #[arg(long, default_value_t = featgraft::flow::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value = "midpoint")]
    stepper: StepperKind,
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Derive all four seeds from one value; the specific flags override.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    seed_template: Option<u64>,
    #[arg(long)]
    seed_inversion: Option<u64>,
    #[arg(long)]
    seed_generation: Option<u64>,
    #[arg(long)]
    seed_dropout: Option<u64>,
    /// Blocks that graft (comma-separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Pad grounding boxes by this many pixels.
    #[arg(long, default_value_t = 0)]
    dilate: usize,
}

impl RunArgs {
    fn config(&self) -> Result<GraftConfig> {
        let derived = Seeds::derive(self.seed);
        let config = GraftConfig {
            tau: self.tau,
            delta: self.delta,
            omega: self.omega,
            steps: self.steps,
            stepper: self.stepper,
            hooked_blocks: self.blocks.clone(),
            seeds: Seeds {
                template: self.seed_template.unwrap_or(derived.template),
                inversion: self.seed_inversion.unwrap_or(derived.inversion),
                generation: self.seed_generation.unwrap_or(derived.generation),
                dropout: self.seed_dropout.unwrap_or(derived.dropout),
            },
            variant: self.variant,
            ..GraftConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    fn inputs(&self) -> Result<(SceneSpec, Vec<ReferenceSpec>)> {
        match (&self.scene, self.demo) {
            (None, Some(seed)) => {
                let (scene, reference) = scenarios::translated_subject(seed);
                Ok((scene, vec![reference]))
            }
            (Some(path), None) => {
                let scene = SceneSpec::load(path)?;
                let refs = self.refs.iter().map(|r| parse_ref(r)).collect::<Result<Vec<_>>>()?;
                Ok((scene, refs))
            }
            _ => Err(GraftError::Config("pass either --scene or --demo".into())),
        }
    }
}

fn parse_ref(arg: &str) -> Result<ReferenceSpec> {
    let (path, subject) = match arg.rsplit_once(':') {
        Some((p, s)) if !s.is_empty() && !s.contains(['/', '\\']) => (p, Some(s)),
        _ => (arg, None),
    };
    ReferenceSpec::from_scene(SceneSpec::load(Path::new(path))?, subject)
}

fn exit_code(err: &GraftError) -> u8 {
    match err {
        GraftError::Stage { .. } => 3,
        e if e.is_config() => 2,
        GraftError::Spec(_) | GraftError::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            run,
            out,
            dump_stages,
            record_dir,
            dump_attention,
        } => {
            let config = run.config()?;
            let (scene, refs) = run.inputs()?;
            let options = RunOptions {
                out_dir: Some(out.clone()),
                dump_stages,
                record_dir,
                dump_attention,
                dilate_grounding: run.dilate,
                ..RunOptions::default()
            };
            let report = run_pipeline_with(&config, &scene, &refs, &options)?.report;
            for s in &report.alignment {
                println!("{}\talignment {:.4}", s.subject, s.alignment);
            }
            println!(
                "retained mean {:.2} of {} pre-masked patches; {:.0} ms; report {}",
                report.retained_mean(),
                report.pre_mask_popcount,
                report.timings.total_ms,
                out.join("report.json").display()
            );
        }
        Command::MatchViz { run, step, block, out } => {
            let config = run.config()?;
            let (scene, refs) = run.inputs()?;
            let options = RunOptions {
                capture: Some((step, block)),
                dilate_grounding: run.dilate,
                ..RunOptions::default()
            };
            let output = run_pipeline_with(&config, &scene, &refs, &options)?;
            let snap = output
                .snapshot
                .ok_or_else(|| GraftError::Config(format!("no grafting at step {step}, block {block}")))?;
            let svg = match_viz(&output.collage.image, &output.image, &snap.matching, &snap.retained)?;
            std::fs::write(&out, svg)?;
            println!("{} matches drawn to {}", snap.retained.popcount(), out.display());
        }
        Command::Sweep {
            run,
            axis,
            values,
            out,
            cells_dir,
        } => {
            let config = run.config()?;
            let (scene, refs) = run.inputs()?;
            let rows = sweep(&config, &scene, &refs, axis, &values, cells_dir.as_deref())?;
            write_sweep_csv(std::fs::File::create(&out)?, &rows)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::Eval { run, image } => {
            let config = run.config()?;
            let (scene, refs) = run.inputs()?;
            let collage = collage_for(&config, &scene, &refs, run.dilate)?;
            let generated = read_png(&image)?;
            let scores: serde_json::Map<String, serde_json::Value> = collage
                .subjects
                .iter()
                .map(|s| (s.id.clone(), eval_alignment(&generated, &s.sprite, &s.pixel_mask).into()))
                .collect();
            println!("{}", serde_json::to_string_pretty(&scores)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
