mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pairseq::{ErrorKind, Result};

/// Environment variable naming the default run root.
pub const RUN_ROOT_ENV: &str = "PAIRSEQ_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "pairseq", version, about = "Paired-sequence transformer on fMRI voxel timeseries")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Threshold the atlas, select, detrend and standardize raw runs.
    Preprocess(PreprocessArgs),
    /// Write a synthetic atlas, raw runs and preprocessed runs.
    SynthGen(SynthArgs),
    /// Build one fold's paired dataset and write its manifest.
    BuildDataset(DatasetArgs),
    /// Pretrain on one fold.
    Pretrain(PretrainArgs),
    /// Same-genre training on one fold, from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// One run per held-out training run, plus a summary table.
    Crossval(CrossvalArgs),
    /// Sweep pretraining hyperparameters on one fold.
    GridSearch(GridArgs),
    /// Finite-difference gradient checks at 64-bit.
    GradCheck(GradCheckArgs),
    /// Validation metrics of a checkpoint on a fold.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    atlas: PathBuf,
    /// Directory of raw whole-atlas `.vxts` runs.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pairseq::preprocess::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = pairseq::preprocess::DEFAULT_TARGET_VOXELS)]
    target_voxels: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    voxels: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Ntp,
    Sg,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Directory of preprocessed `.vxts` runs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    fold: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    train_cap: usize,
    #[arg(long, default_value_t = 400)]
    val_cap: usize,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; missing fields take the regimen defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run root; defaults to $PAIRSEQ_RUN_ROOT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum PretrainRegimen {
    Multitask,
    NtpOnly,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum, default_value = "multitask")]
    regimen: PretrainRegimen,
    #[arg(long, default_value_t = 0)]
    fold: u32,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// `checkpoint:PATH` or `fresh`.
    #[arg(long)]
    init: String,
    #[arg(long, default_value_t = 0)]
    fold: u32,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// multitask, ntp-only, finetune or fresh.
    #[arg(long)]
    regimen: String,
    /// For `finetune`: a pretraining crossval directory holding
    /// `<fold>/best.ckpt`.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Comma-separated held-out runs; all twelve by default.
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<u32>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum, default_value = "multitask")]
    regimen: PretrainRegimen,
    /// JSON search space; missing axes take defaults.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: u32,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    /// multitask, ntp-only, finetune or fresh; selects task and dataset.
    #[arg(long)]
    regimen: String,
    #[arg(long, default_value_t = 0)]
    fold: u32,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn run(cli: Cli, argv: &str) -> Result<u8> {
    use Command::*;
    match cli.command {
        Preprocess(a) => commands::preprocess(a),
        SynthGen(a) => commands::synth_gen(a),
        BuildDataset(a) => commands::build_dataset(a),
        Pretrain(a) => commands::pretrain(a, argv),
        Finetune(a) => commands::finetune(a, argv),
        Crossval(a) => commands::crossval(a, argv),
        GridSearch(a) => commands::grid_search(a),
        GradCheck(a) => commands::grad_check(a),
        Eval(a) => commands::eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let argv = std::env::args().collect::<Vec<_>>().join(" ");
    match run(cli, &argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
