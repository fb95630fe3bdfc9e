use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sonar", version, about = "Continual self-supervised pre-training workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic domain pools (SNRF + labels sidecar).
    GenData(GenData),
    /// Run stratified retrieval and write the stage dataset with its manifest.
    BuildDataset(BuildDataset),
    /// Base pre-training on the general pool.
    Pretrain(Pretrain),
    /// One continual adaptation stage from a checkpoint.
    Adapt(Adapt),
    /// Evaluate a checkpoint against the base state.
    Eval(Eval),
    /// Render the evaluations of a run directory as tables.
    Report(Report),
}

/// Training hyperparameters; each flag overrides the config file.
#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs per phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub mu_reg: Option<f64>,
    #[arg(long)]
    pub lambda_contra: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenData {
    /// TOML file with a `[[domain]]` table per pool.
    #[arg(long, required_unless_present = "desk", conflicts_with = "desk")]
    pub spec: Option<PathBuf>,
    /// Write the built-in desk scenario (general + shifted pools) instead.
    #[arg(long)]
    pub desk: bool,
    /// Seed for the desk scenario.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDataset {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub general: PathBuf,
    #[arg(long)]
    pub adaptive: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub stage: u32,
    /// Dataset size; defaults to the task pool size.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    #[arg(long)]
    pub general: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct Adapt {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub domain: PathBuf,
    #[arg(long)]
    pub general: PathBuf,
    /// Pool of earlier stage datasets; empty when omitted.
    #[arg(long)]
    pub adaptive: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Disable soft reinitialization of underused codes.
    #[arg(long)]
    pub no_reinit: bool,
    /// Disable the contrastive code loss.
    #[arg(long)]
    pub no_contrastive: bool,
    /// Train on the raw domain pool instead of a retrieved dataset.
    #[arg(long)]
    pub no_sampling: bool,
    /// Direct continual pre-training: no sampling, codebook mechanisms or anchors.
    #[arg(long)]
    pub dcpt: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Base checkpoint; its embeddings fit the retention head.
    #[arg(long)]
    pub base: PathBuf,
    /// Labelled general pool used for retention.
    #[arg(long)]
    pub general: PathBuf,
    /// Labelled domain pools for probe scores.
    #[arg(long)]
    pub domain: Vec<PathBuf>,
    /// Row label; defaults to the checkpoint file stem.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Report {
    /// Run directory holding `eval-*.jsonl` files.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write `report.txt` and `report.json`; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
