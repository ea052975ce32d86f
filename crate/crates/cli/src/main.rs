//! `hebbseg`: synthetic data, Hebbian pre-training, fine-tuning, probing,
//! evaluation and oracle checks from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{parse_size, Usage};

#[derive(Parser, Debug)]
#[command(name = "hebbseg", version, about = "Hebbian pre-training and semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Synth(SynthArgs),
    /// Unsupervised Hebbian pre-training of every layer but the head.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning on an r% label regime.
    Finetune(FinetuneArgs),
    /// Train a linear head on frozen features.
    Probe(ProbeArgs),
    /// Per-image segmentation metrics and their summary.
    Eval(EvalArgs),
    /// Check that SWTA finds cluster centroids and HPCA finds principal components.
    VerifyOracles(OracleArgs),
    /// Weight statistics and first-layer kernels as PGM tiles.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleArg {
    Swta,
    Hpca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    S,
    Tsa,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct SynthArgs {
    /// JSON task spec, e.g. {"kind":"blob_segmentation","size":64,...,"samples":200,"seed":0}.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of blob images assigned to the validation split.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct NetArgs {
    /// Stage widths, shallowest first.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Resize inputs to HxW (or N for NxN); defaults to the manifest size.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; telemetry and run.json go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub eta: Option<f32>,
    /// Softmax temperature (SWTA only).
    #[arg(long)]
    pub temp: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SgdArgs {
    #[arg(long)]
    pub lr0: Option<f32>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Multiplicative learning-rate decay.
    #[arg(long)]
    pub decay: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Percentage of labelled training images used, in (0, 100].
    #[arg(long)]
    pub regime: Option<f64>,
    /// A checkpoint path or `random`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable flip/rotation augmentation.
    #[arg(long)]
    #[serde(default)]
    pub no_augment: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub sgd: SgdArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub regime: Option<f64>,
    /// Backbone checkpoint or `random`; never modified.
    #[arg(long)]
    pub init: Option<String>,
    /// Checkpoint of the backbone with the trained probe head.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub sgd: SgdArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Directory of target masks, or a dataset when `--ckpt` is given.
    #[arg(long)]
    pub target: PathBuf,
    /// Directory of predicted masks, paired with the targets by id.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    pub pred: Option<PathBuf>,
    /// Predict the targets with this checkpoint instead of reading `--pred`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset split evaluated with `--ckpt`.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Also write the predicted masks here (with `--ckpt`).
    #[arg(long)]
    pub save_pred: Option<PathBuf>,
    /// Metrics CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct OracleArgs {
    /// Seeds per oracle.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seeds that must pass.
    #[arg(long)]
    pub min_pass: Option<u64>,
    /// Write the per-seed outcomes as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for stats.csv and kernel tiles.
    #[arg(long)]
    pub out: PathBuf,
    /// Pixels per kernel tap in the tiles.
    #[arg(long)]
    pub zoom: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || matches!(e.downcast_ref::<hebbseg::Error>(), Some(hebbseg::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Probe(a) => commands::probe(a),
        Command::Eval(a) => commands::eval(a),
        Command::VerifyOracles(a) => commands::verify_oracles(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}
