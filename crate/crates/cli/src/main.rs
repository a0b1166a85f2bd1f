//! `dpar` command-line driver.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "dpar",
    version,
    about = "Entropy-gated dynamic patch autoregression"
)]
pub struct Cli {
    /// Worker threads for data-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true, visible_alias = "spec")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled token-grid corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the small next-token entropy model.
    TrainEntropy(TrainEntropyArgs),
    /// Precompute per-token entropies for a corpus.
    BuildCache(BuildCacheArgs),
    /// Train the patch model.
    Train(TrainArgs),
    /// Generate grids with incremental patch-skipping inference.
    Sample(SampleArgs),
    /// Partition cached entropies and report statistics.
    Patchify(PatchifyArgs),
    /// Analytic compute estimate for a model config.
    Flops(FlopsArgs),
    /// Evaluate a trained model across inference-time thresholds.
    SweepThreshold(SweepArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainEntropyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildCacheArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub entropy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    /// Entropy model the cache must have been built from.
    #[arg(long)]
    pub entropy: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability of training a sample unconditionally.
    #[arg(long)]
    pub cfg_drop: Option<f64>,
    #[arg(long)]
    pub eth: Option<f64>,
    #[arg(long)]
    pub pmax: Option<usize>,
    /// Continue from a checkpoint, keeping its model config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub entropy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Class to condition on; omitted for unconditional generation.
    #[arg(long)]
    pub label: Option<u32>,
    /// Grid rows; defaults to a square grid.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub eth: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PatchifyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub eth: Option<f64>,
    #[arg(long)]
    pub pmax: Option<usize>,
    #[arg(long)]
    pub row_width: Option<usize>,
    /// Print patch count, average length and length histogram.
    #[arg(long)]
    pub stats: bool,
    /// Write one span line per sample.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Write entropy heatmaps with patch outlines.
    #[arg(long)]
    pub pgm_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub pgm_limit: usize,
    #[arg(long)]
    pub no_gating: bool,
    #[arg(long)]
    pub no_max_length: bool,
    #[arg(long)]
    pub no_row_reset: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    #[arg(long)]
    pub pavg: f64,
    /// Depth of the token-level comparison model; defaults to the total depth.
    #[arg(long)]
    pub baseline_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return USAGE;
    }
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<dpar::Error>()
            .is_some_and(dpar::Error::is_numeric)
            || e.downcast_ref::<commands::SuiteFailure>().is_some()
    });
    if numeric {
        NUMERIC
    } else {
        DATA
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
