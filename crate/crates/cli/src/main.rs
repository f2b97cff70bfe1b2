//! `genret`: command-line driver for the generative retrieval pipeline.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genret_core::training::Objective;

#[derive(Parser, Debug)]
#[command(
    name = "genret",
    version,
    about = "Generative retrieval with residual-quantized document identifiers"
)]
pub struct Cli {
    /// Worker threads for per-query work (0 = all cores).
    #[arg(long, env = "GENRET_THREADS", default_value_t = 0, global = true)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus, query splits, judgments, teacher and pseudo queries.
    Synth(SynthArgs),
    /// Assign residual-quantized identifiers from the M0 dense encoder.
    Quantize(QuantizeArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Retrieve with constrained beam search (or exhaustive scoring) into a TREC run.
    Retrieve(RetrieveArgs),
    /// Score a TREC run against qrels; prints JSON metrics.
    Eval(EvalArgs),
    /// Metrics and prefix survival per prefix length, as CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub docs: usize,
    /// Held-out queries.
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = genret_core::corpus::SyntheticConfig::default().n_train_queries)]
    pub train_queries: usize,
    #[arg(long, default_value_t = 20)]
    pub topics: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = genret_core::pipeline::DEFAULT_PSEUDO_PER_DOC)]
    pub pseudo_per_doc: usize,
    #[arg(long)]
    pub teacher_scale: Option<f64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// M0 checkpoint (default: <dir>/m0.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Identifier length L.
    #[arg(long, default_value_t = 32)]
    pub levels: usize,
    /// Codes per position V.
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = genret_core::rq::DEFAULT_KMEANS_ITERS)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    M0,
    M1,
    M2,
    M3,
    M4,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Progressive,
    NoRetention,
    FullLength,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Progressive => Objective::Progressive,
            ObjectiveArg::NoRetention => Objective::ProgressiveNoRetention,
            ObjectiveArg::FullLength => Objective::FullLengthOnly,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long)]
    pub dir: PathBuf,
    /// TOML stage config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input checkpoint (default: the predecessor's file in <dir>).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs; for m3, epochs of each curriculum phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Curriculum prefix lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "k-neg")]
    pub k_neg: Option<usize>,
    #[arg(long, value_enum, default_value = "progressive")]
    pub objective: ObjectiveArg,
    #[command(flatten)]
    pub shape: ShapeArgs,
}

/// Encoder-decoder shape, used when M0 starts from scratch.
#[derive(Args, Debug)]
pub struct ShapeArgs {
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn_dim: usize,
    #[arg(long, default_value_t = 48)]
    pub max_seq_len: usize,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Model checkpoint (default: <dir>/m4.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query TSV (default: <dir>/queries.dev.tsv).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Results per query (beam width).
    #[arg(long, default_value_t = genret_core::decoder::DEFAULT_BEAM)]
    pub k: usize,
    /// Score every identifier exhaustively instead of beam search.
    #[arg(long)]
    pub brute_force: bool,
    /// Output run file (default: <dir>/run.trec or run.brute.trec).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "genret")]
    pub tag: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Model checkpoint (default: <dir>/m4.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query TSV (default: <dir>/queries.dev.tsv).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Qrels (default: <dir>/qrels.dev.txt).
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long, default_value_t = genret_core::decoder::DEFAULT_BEAM)]
    pub beam: usize,
    /// Prefix lengths (default: 4, 8, 16, 32 clipped to L).
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    /// Output CSV (default: <dir>/report.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
