//! `ssmlab`: synthesize data, train classifiers, analyze their kernels and
//! compare runs.
//!
//! Exit codes: 0 success, 1 replay mismatch, 2 usage or input error,
//! 3 numerical divergence.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ssmlab_core::blocks::Arch;

#[derive(Parser, Debug)]
#[command(name = "ssmlab", version, about = "CNN/S4D sequence classifiers and spectral kernel analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic JSONL dataset.
    Synth(SynthArgs),
    /// Train one architecture on a JSONL dataset.
    Train(TrainArgs),
    /// Time- and frequency-domain analysis of a checkpoint's kernels.
    Analyze(AnalyzeArgs),
    /// Tabulate metrics and spectral summaries of several runs.
    Compare(CompareArgs),
    /// Re-run the command recorded in a manifest and verify artifact hashes.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Longrange,
    Local,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub len: usize,
    /// Marker-to-partner distance (longrange only).
    #[arg(long, default_value_t = 64)]
    pub distance: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    /// JSONL with `code` or `tokens` plus `label` per line.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `auto` (n_neg/n_pos of the training split) or a positive number.
    #[arg(long, default_value = "auto")]
    pub pos_weight: String,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub state_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "6")]
    pub kernel_sizes: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dt_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub dt_max: f64,
    /// 1×1 projection in front of the S4D layer.
    #[arg(long)]
    pub input_adapter: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit the CSVs for this channel instead of the aggregates.
    #[arg(long)]
    pub channel: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    pub sharpness_k: f64,
    #[arg(long, default_value_t = 0.30)]
    pub secondary_threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    pub low_cut: f64,
    #[arg(long, default_value_t = 0.35)]
    pub high_cut: f64,
    #[arg(long, default_value_t = 0.85)]
    pub broadband_entropy: f64,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Run directories, `metrics.json` or `report.json` files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SSMLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SSMLAB_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
