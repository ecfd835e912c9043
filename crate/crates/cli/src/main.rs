//! `cmae` command line: pre-training, probing, fine-tuning, feature analysis, ablation
//! grids and synthetic data generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Exit code for malformed invocations (bad flags, bad config values).
const EXIT_USAGE: u8 = 1;
/// Exit code for failures while running a well-formed command.
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cmae", version, about = "Contrastive masked autoencoder pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train an encoder and write a checkpoint plus step metrics.
    Pretrain(PretrainArgs),
    /// Linear probe (0 blocks) or partial fine-tuning (k blocks) of a checkpoint.
    Probe(ProbeArgs),
    /// Partial fine-tuning of the last k blocks; `--curve` sweeps k = 0..=depth.
    Finetune(FinetuneArgs),
    /// Intra-class and inter-class feature distances of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Run one ablation axis over seeds and write ablation_<axis>.csv.
    Ablate(AblateArgs),
    /// Write a procedural dataset in CIFAR-10 binary layout.
    SynthData(SynthArgs),
}

/// Training configuration: defaults, then the config file, then flags. The data
/// directory falls back to the CMAE_DATA_DIR environment variable.
#[derive(Debug, Args)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// CIFAR-10 binary directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Any config key, e.g. `--set mask_ratio=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate (scaled by batch/256).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Threads for batch preparation.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint path.
    #[arg(long, default_value = "ckpt.cmae")]
    out: PathBuf,
    /// Metrics CSV (default: `<out>.metrics.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Run summary JSON (default: `<out>.summary.json`).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Continue from this checkpoint; its config is used and training flags are ignored.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Stop after this many total steps (the checkpoint can be resumed later).
    #[arg(long)]
    stop_at: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalData {
    /// CIFAR-10 binary directory (default: the checkpoint's, then CMAE_DATA_DIR).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Use only the first N training images for the probe.
    #[arg(long, value_name = "N")]
    probe_train: Option<usize>,
    /// Use only the first N test images.
    #[arg(long, value_name = "N")]
    test: Option<usize>,
}

#[derive(Debug, Args)]
struct ProbeOpts {
    /// linear or mlp (default: linear for 0 blocks, mlp otherwise).
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Hidden width of the MLP head.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Number of trained encoder blocks; 0 is linear probing.
    #[arg(long, default_value_t = 0)]
    blocks: usize,
    #[command(flatten)]
    data: EvalData,
    #[command(flatten)]
    opts: ProbeOpts,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Report every k from 0 (linear probe) to the encoder depth.
    #[arg(long)]
    curve: bool,
    #[command(flatten)]
    data: EvalData,
    #[command(flatten)]
    opts: ProbeOpts,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Second checkpoint reported alongside, e.g. a lambda_c = 0 run.
    #[arg(long, value_name = "CKPT")]
    baseline: Option<PathBuf>,
    #[command(flatten)]
    data: EvalData,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// shift_range, lambda_c, fdec_depth, momentum_mask_ratio, loss_form, components or augmentation.
    #[arg(long)]
    axis: String,
    /// Comma-separated values (default: the published rows of the axis).
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Run independent configs concurrently.
    #[arg(long)]
    parallel: bool,
    /// Concurrent configs in parallel mode (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_name = "N")]
    probe_train: Option<usize>,
    #[arg(long, value_name = "N")]
    test: Option<usize>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_lr: Option<f64>,
    /// Print the configs of every row without running them.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes that map onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cmae::CmaeError> for Failure {
    fn from(e: cmae::CmaeError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::probe(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::SynthData(a) => commands::synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
