//! `recground`: evaluation, dataset statistics, synthetic suites, toy
//! training runs and gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 property failure (gradient check), 2 invalid
//! input or configuration, 3 numeric divergence during training.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use recground::matching::MatcherKind;
use recground::ngdino::Ablation;
use recground::Error;

#[derive(Parser)]
#[command(name = "recground", version, about = "Referring-expression grounding toolkit")]
struct Cli {
    /// Worker threads for data-parallel loops. 1 runs sequentially.
    #[arg(long, global = true, env = "RECGROUND_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Summary statistics of a ground-truth file.
    Stats(StatsArgs),
    /// Generate a synthetic suite with its answer key.
    GenSynth(GenSynthArgs),
    /// Train the count-aware decoder on a synthetic suite and evaluate it.
    TrainToy(TrainToyArgs),
    /// Finite-difference check of every decoder parameter group.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Matcher {
    Greedy,
    Optimal,
}

impl From<Matcher> for MatcherKind {
    fn from(m: Matcher) -> Self {
        match m {
            Matcher::Greedy => MatcherKind::Greedy,
            Matcher::Optimal => MatcherKind::Optimal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxFormatArg {
    /// Pixel `[x, y, w, h]`.
    Xywh,
    /// Normalized `[cx, cy, w, h]`.
    Cxcywh,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth JSON document.
    gt: PathBuf,
    /// Predictions, one JSON object per line.
    pred: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, value_enum, default_value = "greedy")]
    matcher: Matcher,
    /// Require predicted and ground-truth categories to agree when both are present.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    category_strict: bool,
    /// Write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ignore unknown fields instead of rejecting them.
    #[arg(long)]
    lenient: bool,
    #[arg(long, value_enum, default_value = "xywh")]
    box_format: BoxFormatArg,
}

#[derive(Args)]
struct StatsArgs {
    gt: PathBuf,
    /// Write the statistics here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
}

/// Flags overriding fields of a synthetic suite configuration.
#[derive(Args, Default)]
struct SuiteFlags {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_target_rate: Option<f64>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    max_targets: Option<usize>,
    /// Small, medium and large fractions, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    scale_mix: Option<Vec<f64>>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
    #[arg(long)]
    constraint_rate: Option<f64>,
    /// Per-scale color misperception rates, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    color_confusion: Option<Vec<f64>>,
    #[arg(long)]
    image_width: Option<u32>,
    #[arg(long)]
    image_height: Option<u32>,
    #[arg(long)]
    id_prefix: Option<String>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// JSON suite configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    suite: SuiteFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    /// All four combinations of count head and number cross-attention.
    Components,
    /// Number-query slice lengths 1, 10 and 100.
    SliceLength,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Several seeds, comma separated; each runs separately and the
    /// summary reports means.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    /// Number queries per count bin.
    #[arg(long)]
    ls: Option<usize>,
    #[arg(long, value_enum, conflicts_with_all = ["ablate", "ls"])]
    grid: Option<GridArg>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries checked per parameter tensor; 0 checks every entry.
    #[arg(long, default_value_t = 0)]
    samples: usize,
}

/// A failure with its exit code.
pub struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DivergenceDetected { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn property(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    let result = recground::exec::with_threads(threads, || commands::run(cli.command, threads));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
