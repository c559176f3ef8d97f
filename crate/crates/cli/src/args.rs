use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "crossseg", version, about = "Cross-view instance segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-view dataset.
    Gen(GenArgs),
    /// Train a head on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a fixture predictor) on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate every ablation variant over several seeds.
    Sweep(SweepArgs),
    /// Predict the target mask for one image pair and write overlays.
    Infer(InferArgs),
    /// Time repeated forward passes.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value = "medium")]
    pub difficulty: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 70)]
    pub size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub train_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    Plain,
    Bf,
    Pgp,
    Mr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pairs,
    Ssl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrackerArg {
    GroundTruth,
    FeatureCorrelation,
}

/// Model and optimisation overrides, applied on top of `--config` (or the
/// built-in toy defaults).
#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Option<AblateArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub points: Option<u64>,
    /// Bottleneck grid side; must divide the feature map side.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub fusion_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub blocks: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=3))]
    pub refine_iters: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub tracker: Option<TrackerArg>,
    /// Read encoder features from this directory instead of the built-in encoder.
    #[arg(long)]
    pub encoder_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    S2t,
    T2s,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictorArg {
    Model,
    Oracle,
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory; required for the model predictor.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "s2t")]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: PredictorArg,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=3))]
    pub refine_iters: Option<u64>,
    /// Directory for the structured report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub source_mask: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=3))]
    pub refine_iters: Option<u64>,
    /// Seed for point sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pair id under the external encoder directory.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly initialised head is used when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub passes: usize,
    /// Write the per-pass report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}
