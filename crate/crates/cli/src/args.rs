//! Flag definitions for the six subcommands. Every setting here is
//! optional; defaults and config-file values are resolved in `commands`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use drau::model::Variant;

#[derive(Parser)]
#[command(
    name = "drau",
    version,
    about = "Synthetic grid-world VQA: data generation, training, evaluation, ablation, attention export, gradient checking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate train/val splits plus the vocabulary sidecar.
    GenData(GenDataArgs),
    /// Train one model variant and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Sweep variants x seeds and print the mean±std table.
    Ablate(AblateArgs),
    /// Export attention maps for one sample of a dataset.
    Attn(AttnArgs),
    /// Run the finite-difference gradient audit.
    Gradcheck,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Directory receiving train.jsonl, val.jsonl, vocab.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Scenes per split; each scene yields questions-per-scene samples.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene grid side length.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Per-region feature width.
    #[arg(long)]
    pub feat_dim: Option<usize>,
    /// Gaussian feature noise width.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-cell object probability.
    #[arg(long)]
    pub occupancy: Option<f64>,
    /// Per-annotation disagreement probability.
    #[arg(long)]
    pub corruption: Option<f64>,
    #[arg(long)]
    pub questions_per_scene: Option<usize>,
    /// Flat key=value config file, overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory holding gen-data output.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving model.ckpt and trace.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// One of: simple-conv, simple-rvau, dca, dca-rvau, dca-rtau, drau.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Flat key=value config file, overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (.jsonl) to score.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Directory holding gen-data output.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variant names; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Number of seeds; runs use seeds 0..N.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Worker threads for the variant x seed sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Flat key=value config file, overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (.jsonl) to draw the sample from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Sample index within the dataset file.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Directory receiving the per-glimpse maps and answer file.
    #[arg(long)]
    pub out: PathBuf,
}
