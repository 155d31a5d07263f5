//! Command-line driver: synthetic data, training, evaluation, gradient
//! checks and the AGCM placement ablation.
//!
//! Every command resolves one [`RunConfig`] (defaults, then `--config`,
//! then `--seed`, then each `--set key=value`) and writes it to
//! `<out>/config.json` before doing any work.

pub mod commands;
pub mod config;
pub mod gradcheck;

use std::io::Write;
use std::path::{Path, PathBuf};

use agcm_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{Baseline, RunConfig, CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(name = "agcm", version, about = "Salient object detection with adaptive graph convolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic image/mask pairs and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of scenes (overrides synth.count).
        #[arg(long, short = 'n')]
        count: Option<usize>,
    },
    /// Train a model; without --data, trains on synthetic scenes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint, appending to the logs in --out.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint or a baseline predictor on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; its sibling config.json is used when --config is absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score a fixed predictor instead of a model (overrides eval.baseline).
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
    },
    /// Compare analytic and finite-difference gradients of every AGCM stage.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt one op's backward rule (overrides gradcheck.fault).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Train without AGCM, with AGCM at stage 4, and at stages 4 and 5.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of img_<id>.ppm / msk_<id>.pgm pairs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "agcm-out")]
    pub out: PathBuf,
    /// Seed for every stochastic component.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config value, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineArg {
    GroundTruth,
    Half,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::GroundTruth => Baseline::GroundTruth,
            BaselineArg::Half => Baseline::Half,
        }
    }
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

/// Defaults, then the config file (or `fallback` when none is given), then
/// `--seed`, then each override in order.
pub fn resolve_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) if path.is_file() => RunConfig::load(path)?,
        _ => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let common = cli.command.common();
    let fallback = match &cli.command {
        Command::Eval {
            checkpoint: Some(ckpt),
            ..
        } => ckpt.parent().map(|d| d.join(CONFIG_FILE)),
        _ => None,
    };
    let mut cfg = resolve_config(common, fallback.as_deref())?;
    match &cli.command {
        Command::Synth { count: Some(n), .. } => cfg.synth.count = *n,
        Command::Eval {
            baseline: Some(b), ..
        } => cfg.eval.baseline = Some((*b).into()),
        Command::Gradcheck { fault: Some(f), .. } => cfg.gradcheck.fault = Some(f.clone()),
        _ => {}
    }
    cfg.validate()?;

    let out_dir = common.out.as_path();
    commands::create_dir(out_dir)?;
    commands::write_file(&out_dir.join(CONFIG_FILE), &cfg.to_json())?;
    let seed = match cli.command {
        Command::Synth { .. } => cfg.synth.seed,
        Command::Gradcheck { .. } => cfg.gradcheck.seed,
        _ => cfg.train.seed,
    };
    writeln!(out, "seed {seed}; config written to {}", out_dir.join(CONFIG_FILE).display())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))?;

    let data = common.data.as_deref();
    match &cli.command {
        Command::Synth { .. } => commands::cmd_synth(&cfg, out_dir, out),
        Command::Train { resume, .. } => commands::cmd_train(&cfg, data, out_dir, resume.as_deref(), out),
        Command::Eval { checkpoint, .. } => commands::cmd_eval(&cfg, data, out_dir, checkpoint.as_deref(), out),
        Command::Gradcheck { .. } => commands::cmd_gradcheck(&cfg, out_dir, out),
        Command::Ablate { .. } => commands::cmd_ablate(&cfg, data, out_dir, out),
    }
}
