//! `patchloc`: localize, evaluate, train, analyse datasets, degrade images.

mod common;
mod evaluate;
mod localize;
mod perturb;
mod stats;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchloc_core::{AugmentationPolicy, TilerConfig, TrainConfig};

use common::{CmdResult, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "patchloc", version, about = "Inpainting localization from ViT patch tokens")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Produce heatmaps and masks for images.
    Localize(localize::LocalizeArgs),
    /// Score a head on a dataset, optionally under the robustness grid.
    Evaluate(evaluate::EvaluateArgs),
    /// Train a patch head on a dataset.
    Train(train::TrainArgs),
    /// Mask-size statistics over sliding windows.
    Stats(stats::StatsArgs),
    /// Write degraded copies of images.
    Perturb(perturb::PerturbArgs),
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML file with `seed`, `[tiler]`, `[train]` and `[augment]` tables.
    /// Keys present in the file take precedence over flags.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Seed for every stochastic stage.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Continue past failing inputs; exit code 1 if any failed.
    #[arg(long)]
    pub keep_going: bool,
}

/// Sliding-window geometry flags.
#[derive(Args, Debug, Clone, Default)]
pub struct TilerArgs {
    /// Window side in pixels (must match the backend).
    #[arg(long)]
    pub window: Option<usize>,

    #[arg(long)]
    pub stride: Option<usize>,

    /// Images whose short side is below this are upscaled first.
    #[arg(long)]
    pub min_size: Option<usize>,

    /// Logit-space decision threshold.
    #[arg(long)]
    pub threshold: Option<f32>,
}

impl TilerArgs {
    pub fn tiler(&self, backend_window: usize) -> TilerConfig {
        let d = default_tiler(backend_window);
        TilerConfig {
            window: self.window.unwrap_or(d.window),
            stride: self.stride.unwrap_or(d.stride),
            min_size: self.min_size.unwrap_or(d.min_size),
            threshold: self.threshold.unwrap_or(d.threshold),
        }
    }
}

/// Default geometry for a backend window; the stride never exceeds the window.
pub fn default_tiler(window: usize) -> TilerConfig {
    let d = TilerConfig::default();
    TilerConfig {
        window,
        stride: d.stride.min(window),
        ..d
    }
}

/// Resolves flags and the optional config file into one validated config.
pub fn resolve(common: &CommonArgs, tiler: TilerConfig, train: TrainConfig) -> CmdResult<RunConfig> {
    let augment = AugmentationPolicy {
        size: tiler.window,
        ..AugmentationPolicy::default()
    };
    let mut cfg = RunConfig {
        seed: common.seed,
        tiler,
        train,
        augment,
    }
    .with_file(common.config.as_deref())?;
    // the top-level seed drives training too
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Localize(a) => localize::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Train(a) => train::run(a),
        Command::Stats(a) => stats::run(a),
        Command::Perturb(a) => perturb::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
