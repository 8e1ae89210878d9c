use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "rigidflow", version, about = "Rigid multi-body scene flow between two point clouds")]
pub struct Cli {
    /// Worker threads for the pipeline; 0 picks one per core.
    #[arg(long, global = true, env = "RGF_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate rigid scene flow from a source to a target frame.
    Flow(FlowArgs),
    /// Generate a synthetic frame pair with ground truth.
    Synth(SynthArgs),
    /// Score a predicted flow file against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureSource {
    /// Features stored in the input frames.
    Oracle,
    /// Raw coordinates.
    Xyz,
    /// Features read from `--src-features` / `--tgt-features`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskSource {
    /// Foreground probabilities stored in the input frames.
    Oracle,
    /// Probabilities read from `--src-masks` / `--tgt-masks`.
    File,
    /// Foreground is anything higher than `ground_y` plus a fixed margin.
    Height,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, value_enum, default_value_t = FeatureSource::Oracle)]
    pub features: FeatureSource,
    #[arg(long)]
    pub src_features: Option<PathBuf>,
    #[arg(long)]
    pub tgt_features: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MaskSource::Oracle)]
    pub masks: MaskSource,
    #[arg(long)]
    pub src_masks: Option<PathBuf>,
    #[arg(long)]
    pub tgt_masks: Option<PathBuf>,
    /// Run ICP refinement of the ego-motion and every cluster.
    #[arg(long)]
    pub refine: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Key-value pipeline configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set voxel_size=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Ground-truth ego-motion, enabling ego metrics and the energy.
    #[arg(long)]
    pub gt_ego: Option<PathBuf>,
    /// Output flow file.
    #[arg(long, default_value = "flow.rgf")]
    pub out: PathBuf,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include per-stage wall-clock times in the report.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory to write the scene into; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub points_per_object: Option<usize>,
    #[arg(long)]
    pub background_points: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_ego_rotation: Option<f64>,
    #[arg(long)]
    pub max_ego_translation: Option<f64>,
    #[arg(long)]
    pub max_object_rotation: Option<f64>,
    #[arg(long)]
    pub max_object_translation: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted flow (RGF1 or text with flow columns).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth flow.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, requires = "gt_ego")]
    pub pred_ego: Option<PathBuf>,
    #[arg(long, requires = "pred_ego")]
    pub gt_ego: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}
