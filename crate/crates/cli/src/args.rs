use std::path::PathBuf;

use c2f_core::model::Width;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "c2f", version, about = "Coarse-to-fine semi-supervised change detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition a dataset's training ids into labelled and unlabelled sets.
    Split(SplitArgs),
    /// Generate a synthetic change-detection dataset.
    Synth(SynthArgs),
    /// Train from a JSON run configuration.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Write predicted change masks for every tile of a dataset.
    Infer(InferArgs),
    /// Render confusion maps from predicted and reference mask PNGs.
    Viz(VizArgs),
    /// Run one of the ablation sweeps.
    Ablate(AblateArgs),
    /// Finite-difference audit of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Median training and inference wall-clock times.
    Timing(TimingArgs),
}

/// `--seed` beats `C2F_SEED`, which beats the config file.
#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    #[arg(long, env = "C2F_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset root with A/, B/ and label/ (and optionally manifest.json).
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub ratio: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Name recorded in the manifest; defaults to the root directory name.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 20)]
    pub n_val: usize,
    #[arg(long, default_value_t = 40)]
    pub n_test: usize,
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Semi,
}

/// Flags that override fields of the training configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Width multiplier, as a fraction ("1/4") or decimal.
    #[arg(long)]
    pub width: Option<Width>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Labelled,
    Unlabelled,
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Labelled => "labelled",
            SplitName::Unlabelled => "unlabelled",
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Which network a checkpoint provides and at what size.
#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Use the EMA teacher stored alongside the student.
    #[arg(long)]
    pub teacher: bool,
    /// Width the weights are expected to have; defaults to the width
    /// recorded in the checkpoint.
    #[arg(long)]
    pub width: Option<Width>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: CheckpointArgs,
    #[arg(long)]
    pub root: PathBuf,
    /// Defaults to `<root>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one confusion-map PNG per sample under viz/.
    #[arg(long)]
    pub viz: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: CheckpointArgs,
    /// Directory with A/ and B/; labels are never read.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Directory of predicted mask PNGs (0/255).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference mask PNGs with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Modules,
    Warmup,
    Beta,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Modules => "modules",
            Sweep::Warmup => "warmup",
            Sweep::Beta => "beta",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "1/8")]
    pub width: Width,
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f32,
    #[arg(long, default_value_t = 1e-2)]
    pub tolerance: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Test hook: scale the analytic gradient of parameters with this
    /// name prefix so the audit must fail.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// Optional run configuration supplying the training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<Width>,
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    /// Synthetic training tiles per timed epoch.
    #[arg(long, default_value_t = 16)]
    pub tiles: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(3..))]
    pub reps: u64,
    #[command(flatten)]
    pub seed: SeedArg,
}
