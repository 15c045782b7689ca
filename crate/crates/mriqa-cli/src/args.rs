//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "mriqa",
    about = "Mask-reference image quality assessment pipeline",
    version
)]
pub struct Cli {
    /// Seed for every randomized stage; identical seeds reproduce outputs
    /// byte for byte.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON config file with optional "backbone", "head" and "train"
    /// sections; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for batch and evaluation parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Force single-threaded, strictly sequential processing.
    #[arg(long, global = true, default_value_t = false)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build one masked image from a distorted/reference pair and write the
    /// mask sidecars next to it.
    Mask(MaskArgs),
    /// Generate synthetically distorted images plus a manifest from a
    /// directory of reference PNGs.
    Synth(SynthArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score one distorted image against its reference.
    Score(ScoreArgs),
    /// Evaluate a checkpoint on one or more manifests (SRCC/PLCC report per
    /// manifest).
    Eval(EvalArgs),
    /// Print a checkpoint header.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask selection: "diff" (difference-driven) or "random".
    #[arg(long, default_value = "diff")]
    pub mode: String,
    /// Replacement ratio for random mode.
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of reference PNGs.
    #[arg(long)]
    pub refs: PathBuf,
    /// Output directory (created if needed); receives distorted images,
    /// copies of the references, and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Distortion kinds, assigned round-robin over the references.
    #[arg(long, default_value = "blur,noise,quantize,contrast")]
    pub kinds: String,
    /// Levels per reference (1..=N, monotonically stronger).
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disable pipeline stages: comma list of agcs, mg, fmm.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long = "mask-mode")]
    pub mask_mode: Option<String>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Emit a per-epoch validation SRCC over the test split.
    #[arg(long, default_value_t = false)]
    pub val: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Patches aggregated into the prediction.
    #[arg(long)]
    pub tta: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// In-dataset manifest; its test split is evaluated.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Additional manifests evaluated in full (cross-dataset).
    #[arg(long)]
    pub cross: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}
