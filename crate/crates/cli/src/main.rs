mod commands;
mod manifest;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit-status classes. Attached to an error chain as context; the outermost
/// one decides the process status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Usage = 2,
    Data = 3,
    Config = 4,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Exit::Usage => "usage error",
            Exit::Data => "data error",
            Exit::Config => "config error",
        })
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "bimoe",
    version,
    about = "Brain-region mixture-of-experts affect classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset in the interchange format.
    Synth(SynthArgs),
    /// Leave-one-subject-out training with per-fold checkpoints.
    Train(TrainArgs),
    /// Accuracy of saved checkpoints on a dataset.
    Eval(EvalArgs),
    /// Exact Shapley attribution of the fused margin to the experts.
    Explain(ExplainArgs),
    /// LOSO accuracy over a grid of attention heads, ξ1 and ξ2.
    Sweep(SweepArgs),
    /// Dump the wPLI adjacency of one window as CSV.
    Adjacency(AdjacencyArgs),
    /// Re-run the command recorded in a manifest, writing to a new output.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub subjects: u32,
    /// Trials per subject.
    #[arg(long, default_value_t = 10)]
    pub trials: u32,
    /// deap32 or dreamer14.
    #[arg(long, default_value = "deap32")]
    pub scheme: String,
    #[arg(long, default_value_t = 0.8)]
    pub separability: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

/// Settings shared by every command that builds a model from data.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// valence, arousal, dominance or liking.
    #[arg(long, default_value = "valence")]
    pub dimension: String,
    /// eeg_only or multimodal; overrides the config file.
    #[arg(long)]
    pub mode: Option<String>,
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides train.max_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Built-in region scheme (deap32 or dreamer14); defaults to the one
    /// matching the dataset.
    #[arg(long, conflicts_with = "partition")]
    pub scheme: Option<String>,
    /// Region mapping file with `region: ch1,ch2,...` lines.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint files; may be repeated.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Windows to score: the checkpoint's held-out subject (`test`), its
    /// training subjects (`train`) or everything (`all`).
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Optional CSV of the printed table.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub background: usize,
    #[arg(long, default_value_t = 400)]
    pub test: usize,
    #[arg(long, default_value_t = 0.05)]
    pub winsor: f64,
    /// Seed for drawing the background and test windows.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Attention head counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub xi1: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub xi2: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AdjacencyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: u32,
    #[arg(long)]
    pub trial: u32,
    /// Window index within the trial.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Restrict to one region's channels (needs a scheme or partition).
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long, conflicts_with = "partition")]
    pub scheme: Option<String>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// key = value config file (preprocessing keys apply).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Replaces the recorded output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Usage as u8 } else { 0 });
        }
    };
    match commands::dispatch(cli.command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Exit>().map_or(1, |e| *e as u8);
            ExitCode::from(code)
        }
    }
}
