//! `zad`: zero-shot temporal action detection from the command line.
//!
//! Subcommands: `detect` (training-free detector), `adapt` (per-video
//! test-time adaptation, then detection), `eval` (mAP over a tIoU grid),
//! `diagnose` (false-positive profile) and `synth` (synthetic corpora).
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 runtime.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use zad_core::pipeline::{ScoreKind, ThresholdPolicy};
use zad_core::synth::BackgroundMode;
use zad_core::tta::{NegativeStrategy, PositiveStrategy};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] zad_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use zad_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 4,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Sampling(_) => 4,
                _ => 3,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Thumos,
    Anet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreArg {
    Logoic,
    Oic,
    Similarity,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Logoic => ScoreKind::LogOic,
            ScoreArg::Oic => ScoreKind::Oic,
            ScoreArg::Similarity => ScoreKind::Similarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosArg {
    Pcs,
    Random,
}

impl From<PosArg> for PositiveStrategy {
    fn from(p: PosArg) -> Self {
        match p {
            PosArg::Pcs => PositiveStrategy::Pcs,
            PosArg::Random => PositiveStrategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegArg {
    Random,
    Farthest,
}

impl From<NegArg> for NegativeStrategy {
    fn from(n: NegArg) -> Self {
        match n {
            NegArg::Random => NegativeStrategy::Random,
            NegArg::Farthest => NegativeStrategy::Farthest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthPreset {
    Clean,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackgroundArg {
    Orthogonal,
    Random,
    Distractor,
}

impl From<BackgroundArg> for BackgroundMode {
    fn from(b: BackgroundArg) -> Self {
        match b {
            BackgroundArg::Orthogonal => BackgroundMode::Orthogonal,
            BackgroundArg::Random => BackgroundMode::RandomUnit,
            BackgroundArg::Distractor => BackgroundMode::DistractorClass,
        }
    }
}

pub fn parse_threshold(s: &str) -> Result<ThresholdPolicy, String> {
    if s == "mean" {
        return Ok(ThresholdPolicy::MeanOfTrace);
    }
    match s.strip_prefix("fixed:").map(str::parse::<f64>) {
        Some(Ok(v)) if v.is_finite() => Ok(ThresholdPolicy::Fixed(v)),
        _ => Err(format!("expected `mean` or `fixed:<number>`, got {s:?}")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "zad", version, about = "Zero-shot temporal action detection on precomputed embeddings")]
struct Cli {
    /// Worker threads. Defaults to $ZAD_JOBS, else the number of CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// TOML file with [pipeline], [adapt] and [run] sections; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect actions without any adaptation.
    Detect(DetectArgs),
    /// Adapt projections per video at test time, then detect.
    Adapt(AdaptArgs),
    /// Score a prediction file against ground truth.
    Eval(EvalArgs),
    /// False-positive profile for the top-1G..top-3G predictions.
    Diagnose(DiagnoseArgs),
    /// Write a seeded synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    /// Directory of .vfeat files.
    #[arg(long)]
    pub features: PathBuf,
    /// Prompt bank (.tfeat).
    #[arg(long)]
    pub prompts: PathBuf,
    /// Prediction JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Run manifest path [default: <out>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Hyperparameter preset.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Moving-average window in frames.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Drop the zero-frequency bin from the spectral energy.
    #[arg(long)]
    pub dc_exclude: bool,
    /// `mean` or `fixed:<value>`.
    #[arg(long, value_parser = parse_threshold)]
    pub threshold: Option<ThresholdPolicy>,
    /// Segment score.
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    /// Skip the spectral calibration.
    #[arg(long)]
    pub no_calibrate: bool,
    /// Use the first ground-truth label of each video instead of the pseudo-label.
    #[arg(long, value_name = "ANNOT")]
    pub oracle_label: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub detect: DetectArgs,
    /// Adaptation steps M.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Positives and negatives per step.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the representation loss.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long, value_enum)]
    pub pos: Option<PosArg>,
    #[arg(long, value_enum)]
    pub neg: Option<NegArg>,
    /// Draw samples from these ground-truth segments instead of the trace.
    #[arg(long, value_name = "ANNOT")]
    pub oracle_samples: Option<PathBuf>,
    /// JSON-lines loss trajectory.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Keep adapted projections from one video to the next (sequential).
    #[arg(long)]
    pub carry_state: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// `thumos`, `anet`, or a comma-separated list of thresholds.
    #[arg(long, default_value = "thumos")]
    pub grid: String,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// tIoU threshold for a correct localization.
    #[arg(long, default_value_t = 0.5)]
    pub tiou: f64,
    /// Largest budget multiplier k in top-kG.
    #[arg(long, default_value_t = 3)]
    pub max_k: usize,
    /// Profile JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Bar-chart data as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "clean")]
    pub preset: SynthPreset,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-coordinate noise sigma.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub background: Option<BackgroundArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = config::load(cli.config.as_deref())?;
    let jobs = commands::resolve_jobs(cli.jobs, &file)?;
    match cli.command {
        Command::Detect(a) => commands::detect(&a, &file, jobs),
        Command::Adapt(a) => commands::adapt(&a, &file, jobs),
        Command::Eval(a) => commands::eval(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zad: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
