//! The `knnplus` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 training error (including a failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use knnplus::{Error, Execution};

#[derive(Parser, Debug)]
#[command(name = "knnplus", version, about = "Neighbourhood classification for cross-lingual content flagging")]
pub struct Cli {
    /// TOML file of default flags for the subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap the number of worker threads. Results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Run every stage sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Embed dataset texts with the hashed character 3-gram embedder.
    Embed(EmbedArgs),
    /// Build or manage a retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Train the head on target queries against a source index.
    Train(TrainArgs),
    /// Pre-train the head with source examples as queries, self excluded.
    CliPretrain(PretrainArgs),
    /// Label queries with a trained head.
    Predict(PredictArgs),
    /// Evaluate a trained head on a labelled dataset and write a report.
    Evaluate(EvaluateArgs),
    /// Sweep a voting baseline over neighbour counts.
    Baseline(BaselineArgs),
    /// Majority-vote sweep before and after re-ranking by the trained head.
    RerankEval(RerankArgs),
    /// Train once per loss weight and tabulate dev and test F1.
    LambdaSweep(LambdaSweepArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic source/target task.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
pub enum IndexCommand {
    /// Index a labelled dataset with its vectors.
    Build(IndexBuildArgs),
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Dataset (JSONL); labels are not needed.
    #[arg(long)]
    pub data: PathBuf,
    /// Output vector file (binary).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VectorArgs {
    /// Retrieval vectors, text or binary; repeat to merge several files.
    #[arg(long = "vectors", value_name = "FILE", required = true)]
    pub vectors: Vec<PathBuf>,
    /// Head input vectors, if different from the retrieval vectors.
    #[arg(long, value_name = "FILE")]
    pub head_vectors: Option<PathBuf>,
    /// Pair vectors keyed `query<U+0001>neighbour`; selects a pair-feature head.
    #[arg(long, value_name = "FILE")]
    pub pair_vectors: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IndexBuildArgs {
    /// Labelled source dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Output index file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Clone)]
pub struct HeadArgs {
    /// Neighbours per query.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Weight of the classification loss.
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    /// Projection dimension.
    #[arg(long, default_value_t = 64)]
    pub p: usize,
    /// Attention hidden size.
    #[arg(long, default_value_t = 16)]
    pub h_r: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Queries per optimiser step.
    #[arg(long, default_value_t = 8)]
    pub accum: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Dev evaluations per epoch.
    #[arg(long, default_value_t = 4)]
    pub eval_every: usize,
    /// Evaluations without sufficient dev-F1 gain before stopping.
    #[arg(long, default_value_t = 4)]
    pub patience: usize,
    /// Minimum dev-F1 gain that counts as improvement.
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    /// Steps between periodic checkpoints; 0 disables them.
    #[arg(long, default_value_t = 160)]
    pub checkpoint_every: usize,
    /// Seed for initialisation and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub source_index: PathBuf,
    #[arg(long)]
    pub target_train: PathBuf,
    #[arg(long)]
    pub target_dev: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Directory for checkpoints and history.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Start from this checkpoint; its shapes override --p and --h-r.
    #[arg(long, value_name = "CKPT")]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Labelled source dataset, used both as queries and as neighbours.
    #[arg(long)]
    pub source: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Prebuilt source index; built from --source if omitted.
    #[arg(long)]
    pub source_index: Option<PathBuf>,
    /// Optional dev set for model selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub accum: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 160)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub head: HeadArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Queries (JSONL); labels optional and ignored.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Output TSV of predictions.
    #[arg(long)]
    pub out: PathBuf,
    /// Add neighbour ids, attention weights and agreement probabilities.
    #[arg(long)]
    pub explain: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Output report (TOML).
    #[arg(long)]
    pub out: PathBuf,
    /// Include per-example explanations in the report.
    #[arg(long)]
    pub explain: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VoteArg {
    Majority,
    Weighted,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub method: VoteArg,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Comma-separated neighbour counts.
    #[arg(long, default_value = "3,5,10,20")]
    pub k_sweep: String,
    /// Retrieval depth; defaults to max(20, largest k).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Output TSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub vectors: VectorArgs,
    #[arg(long, default_value = "3,5,10,20")]
    pub k_sweep: String,
    /// Retrieval depth re-ranked by the head; defaults to max(20, largest k).
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LambdaSweepArgs {
    /// Comma-separated loss weights in [0, 1].
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub lambdas: String,
    #[arg(long)]
    pub source_index: PathBuf,
    #[arg(long)]
    pub target_train: PathBuf,
    #[arg(long)]
    pub target_dev: PathBuf,
    /// Optional test set evaluated with each best checkpoint.
    #[arg(long)]
    pub target_test: Option<PathBuf>,
    #[command(flatten)]
    pub vectors: VectorArgs,
    /// Output TSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Fail when the maximum relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub source_n: usize,
    #[arg(long, default_value_t = 300)]
    pub target_n: usize,
    /// Vector dimension; half of it carries the label signal.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Train,dev,test fractions for the target split files.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub split: String,
}

fn command() -> clap::Command {
    fn override_self(cmd: clap::Command) -> clap::Command {
        cmd.args_override_self(true).mut_subcommands(override_self)
    }
    override_self(Cli::command())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Training(_) => 3,
        _ => 2,
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match config::expand(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match command().try_get_matches_from(&argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match with_threads(cli.threads, || commands::dispatch(&cli.command, exec)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<u16>, f: impl FnOnce() -> knnplus::Result<T> + Send) -> knnplus::Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?
            .install(f),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T>(_threads: Option<u16>, f: impl FnOnce() -> knnplus::Result<T>) -> knnplus::Result<T> {
    f()
}
