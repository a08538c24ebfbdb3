//! `osseon` command line: synth, enhance, train, infer and eval.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "osseon", version, about = "Bone surface segmentation in ultrasound images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the subcommands that need them.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(4..))]
        count: u64,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(32..))]
        size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute phase and shadow features of one image or a directory.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixel spacing in mm, overriding any sidecar file.
        #[arg(long)]
        spacing: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the pre-enhancing net and the U-net on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feature cache directory (default: <out>/feature_cache).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Segment and classify images with trained models.
    Infer {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the U-net directly on the B-mode image.
        #[arg(long)]
        no_pe: bool,
        #[arg(long)]
        spacing: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score probability maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        spacing: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write ground truth and detection overlays here.
        #[arg(long)]
        overlays: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("OSSEON_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("OSSEON_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { out, count, size, seed } => commands::synth(&out, count as usize, size as usize, seed),
        Command::Enhance { input, out, spacing, cfg } => commands::enhance_cmd(&input, &out, spacing, &cfg.resolve()?),
        Command::Train { data, out, cache, cfg } => commands::train_cmd(&data, &out, cache.as_deref(), &cfg.resolve()?),
        Command::Infer {
            models,
            input,
            out,
            no_pe,
            spacing,
            cfg,
        } => {
            // settings saved at training time stand in for a missing --config
            let saved = models.join(commands::CONFIG_FILE);
            let file = cfg.config.clone().or_else(|| saved.is_file().then_some(saved));
            let run_cfg = RunConfig::resolve(file.as_deref(), &cfg.set)?;
            commands::infer_cmd(&models, &input, &out, no_pe, spacing, &run_cfg)
        }
        Command::Eval {
            pred,
            gt,
            spacing,
            out,
            overlays,
            cfg,
        } => commands::eval_cmd(&pred, &gt, spacing, &out, overlays.as_deref(), &cfg.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
