mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hsadapt::adapters::{AdapterKind, GateActivation};
use hsadapt::generation::GenMode;

use crate::error::CliError;

/// Residual adapter experiments on a frozen toy decoder.
#[derive(Parser, Debug)]
#[command(name = "hsadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic corpus and toy model weights.
    Synth(SynthArgs),
    /// Cache frozen hidden states for every fact and anchor, and fix the splits.
    Cache(CacheArgs),
    /// Train one adapter on one split.
    Train(TrainArgs),
    /// Score splits with or without an adapter.
    Eval(EvalArgs),
    /// Aggregate evaluation results into the held-out report.
    Report(ReportArgs),
    /// Sweep steering vectors over layers and strengths.
    Steer(SteerArgs),
    /// Greedy decoding with an adapter attached.
    Generate(GenerateArgs),
    /// Gradient-bug reproduction and finite-difference checks.
    Gradcheck(GradcheckArgs),
    /// Recompute the published statistics from the shipped data.
    Stats(StatsArgs),
    /// cache → train → eval → report over every split and adapter kind.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 31)]
    pub facts: usize,
    #[arg(long, default_value_t = 10)]
    pub anchors: usize,
    /// Toy model layers.
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Seed for the model weights; defaults to `--seed`.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct CacheArgs {
    /// Directory holding facts.jsonl, anchors.jsonl and model.toy.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub n_splits: usize,
    #[arg(long, default_value_t = 15)]
    pub train_size: usize,
}

/// Trainer settings; each flag overrides the config file.
#[derive(Args, Debug, Default, Clone, Serialize)]
pub struct TrainOverrides {
    /// TOML file with trainer keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<AdapterKind>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub anchor_floor: Option<f64>,
    #[arg(long)]
    pub anchor_weight: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub d_inner: Option<usize>,
    #[arg(long)]
    pub param_budget: Option<usize>,
    #[arg(long)]
    pub gate: Option<GateActivation>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Output directory of `cache`.
    #[arg(long)]
    pub cache_dir: PathBuf,
    /// Zero-based split index.
    #[arg(long, default_value_t = 0)]
    pub split: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub cache_dir: PathBuf,
    /// Adapter weights; omit for the baseline.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Zero-based split indices; all splits when omitted.
    #[arg(long, value_delimiter = ',')]
    pub split: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// results.jsonl files from `eval`.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Corpus directory, for the per-level table.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SteerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Layers to steer; defaults to five evenly spaced layers.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub strengths: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value = "baseline")]
    pub mode: GenMode,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, default_value_t = hsadapt::generation::DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    /// Also print the baseline continuation.
    #[arg(long)]
    pub side_by_side: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Overrides the eps-derived tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    /// Golden data directory; the compiled-in copy when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_splits: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Adapter kinds to train, e.g. `swiglu,linear`.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<AdapterKind>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

fn configure_workers() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("HSA_WORKERS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("HSA_WORKERS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Cache(a) => commands::cache(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
        Command::Steer(a) => commands::steer(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
