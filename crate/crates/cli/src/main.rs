mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Distributed-lag transformer forecaster.
#[derive(Parser, Debug)]
#[command(name = "dlformer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a data split, or run the lag/horizon sweep.
    Eval(EvalArgs),
    /// Export attention-based (feature, lag) importance.
    Explain(ExplainArgs),
    /// Forecast the next horizon from the most recent window.
    Predict(PredictArgs),
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lags=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress per-epoch lines on stdout.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data file; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Train and score one model per (lags, horizon) cell.
    #[arg(long)]
    sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = "3,6,12,24")]
    lags: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,12")]
    horizons: Vec<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split whose windows are averaged; defaults to the run's `explain_split`.
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
    /// Keep only the N heaviest (feature, lag) pairs, sorted descending.
    #[arg(long, value_name = "N")]
    top: Option<usize>,
    /// Also write one map per forecast step.
    #[arg(long)]
    per_horizon: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Forecast CSV; defaults to `forecast.csv` next to the checkpoint.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator, e.g. `lagged-copy(j=2,tau=3,sigma=0.01)`.
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 1000)]
    rows: usize,
    /// Column count including the target.
    #[arg(long, default_value_t = 3)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
        Command::Predict(a) => commands::predict(a),
        Command::Synth(a) => commands::synth(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
