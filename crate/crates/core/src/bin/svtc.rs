// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use visual_circuits::harness::{ExperimentConfig, Pipeline, Stage};
use visual_circuits::Error;

#[derive(Parser)]
#[command(name = "svtc", version, about = "Synthetic visual-reasoning circuit experiments")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Regenerate data and rerun stages even when inputs are unchanged.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate train/val/test splits with images.
    GenData,
    /// Recompute every answer from metadata.
    Validate,
    /// Run the surrogate and write activation shards.
    Extract,
    /// Linear probes per layer with a shuffled-label control.
    Probe,
    /// Train TopK dictionaries.
    TrainSae,
    /// Selectivity scores and feature sets.
    Select,
    /// Norm-matched scale calibration.
    Calibrate,
    /// Steering runs, scale sweeps and the per-layer sensitivity profile.
    Intervene,
    /// Zero-ablation flip rates.
    Ablate,
    /// Random and permuted controls with bootstrap tables.
    Controls,
    /// Geometric diagnostics.
    Geometry,
    /// Spatial heatmaps.
    Report,
    /// Every stage in order.
    All,
}

impl Cmd {
    fn stages(self) -> Vec<Stage> {
        match self {
            Cmd::GenData => vec![Stage::Gen],
            Cmd::Validate => vec![Stage::Validate],
            Cmd::Extract => vec![Stage::Extract],
            Cmd::Probe => vec![Stage::Probe],
            Cmd::TrainSae => vec![Stage::Sae],
            Cmd::Select => vec![Stage::Select],
            Cmd::Calibrate => vec![Stage::Calibrate],
            Cmd::Intervene => vec![Stage::Intervene],
            Cmd::Ablate => vec![Stage::Ablate],
            Cmd::Controls => vec![Stage::Controls],
            Cmd::Geometry => vec![Stage::Geometry],
            Cmd::Report => vec![Stage::Report],
            Cmd::All => Stage::ALL.to_vec(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dependency { .. } | Error::Config(_) | Error::Exists(_) => 2,
        Error::Validation { .. } => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut pipeline = Pipeline::new(cfg, cli.out.clone(), cli.overwrite)?;
    pipeline.run(&cli.cmd.stages())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
