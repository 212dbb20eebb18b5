//! `rubric`: generate synthetic multi-rater data, train a scorer, evaluate it
//! with optional conformal calibration, and measure rater agreement.

mod commands;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rubric_core::dataio::Aspect;
use rubric_core::metrics::EvalMode;
use rubric_core::scorer::StrategyKind;

/// Exit status for bad flag combinations caught after parsing.
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "rubric", version)]
#[command(about = "Uncertainty-aware rubric scoring on multi-rater data")]
#[command(after_help = "Examples:
  rubric generate --out data --n 2500 --holdout 2000 --seed 7
  rubric train --data data/annotations.jsonl --strategy mrr_gc --out run
  rubric evaluate --checkpoint run/checkpoint.bin --data data/holdout.jsonl --calibrate --out eval
  rubric agreement --data data/annotations.jsonl --out agree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic multi-rater corpus
    Generate(GenerateArgs),
    /// Train a scorer with one objective
    Train(TrainArgs),
    /// Score a dataset and write metric reports
    Evaluate(EvaluateArgs),
    /// Rater-rater QWK for every aspect
    Agreement(AgreementArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Utterances in the main split
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    /// Utterances in a held-out split drawn from the same generator (0 = none)
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Raters per utterance
    #[arg(long, default_value_t = 5)]
    pub raters: usize,
    /// Smallest rater noise SD
    #[arg(long, default_value_t = 0.3)]
    pub noise_low: f64,
    /// Largest rater noise SD
    #[arg(long, default_value_t = 2.0)]
    pub noise_high: f64,
    /// Write features inline instead of a binary sidecar [default: off]
    #[arg(long)]
    pub inline_features: bool,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Annotation JSONL file
    #[arg(long)]
    pub data: PathBuf,
    /// Feature sidecar for `feat_ref` lines [default: <stem>_features.bin, then features.bin next to --data]
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Objective: dicl, srr_m, mrr_m, mrr_g or mrr_gc
    #[arg(long, value_parser = parse_kind)]
    pub strategy: StrategyKind,
    /// Aspect for the single-aspect objectives (dicl, srr_m)
    #[arg(long, value_parser = parse_aspect)]
    pub aspect: Option<Aspect>,
    /// Hidden layer width
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// AdamW learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Decoupled weight decay (weights only)
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Mini-batch size
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Passes over the data
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Keep file order instead of reshuffling every epoch [default: off]
    #[arg(long)]
    pub no_shuffle: bool,
    /// Seed for initialisation and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated modes: strict, tolerance1, high_low_cal [default: strict,tolerance1 plus high_low_cal with --calibrate; strict for dicl]
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Option<Vec<EvalMode>>,
    /// Run k-fold conformal calibration (mrr_g, mrr_gc) [default: off]
    #[arg(long)]
    pub calibrate: bool,
    /// Miscoverage level; target coverage is 1 - alpha
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Calibration folds
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Clip reported intervals to [1, 10] [default: off]
    #[arg(long)]
    pub clip_intervals: bool,
    /// Seed for fold assignment
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AgreementArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> Result<StrategyKind, String> {
    s.parse()
}

fn parse_aspect(s: &str) -> Result<Aspect, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse()
}

/// A flag combination that parses but makes no sense.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Agreement(a) => commands::agreement(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
