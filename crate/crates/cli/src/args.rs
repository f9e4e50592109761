use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use priorattn::attention::{TEMP_CUB, TEMP_MINI_MODIFIED, TEMP_MINI_ORIGINAL};
use priorattn::data_io::Split;
use priorattn::episodes::BaseShots;
use priorattn::train::OptimizerKind;

#[derive(Debug, Parser)]
#[command(name = "priorattn", version, about = "Few-shot evaluation with prior-entropy spatial attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clutter dataset and prior head.
    Synth(SynthArgs),
    /// Compute attention maps for every example in a manifest.
    Attend(AttendArgs),
    /// Fine-tune the adapter and cosine head on base classes.
    BaseTrain(BaseTrainArgs),
    /// Run episodic evaluation over a grid of settings.
    Eval(EvalArgs),
    /// Compare analytic dense-cost gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

/// Presets for the attention temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Cub,
    Mini,
    MiniOriginal,
}

impl Profile {
    pub fn temperature(self) -> f64 {
        match self {
            Profile::Cub => TEMP_CUB,
            Profile::Mini => TEMP_MINI_MODIFIED,
            Profile::MiniOriginal => TEMP_MINI_ORIGINAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Optimizer {
    #[value(alias = "sgd-nesterov")]
    Sgd,
    Adam,
}

impl From<Optimizer> for OptimizerKind {
    fn from(o: Optimizer) -> Self {
        match o {
            Optimizer::Sgd => OptimizerKind::SgdNesterov,
            Optimizer::Adam => OptimizerKind::Adam,
        }
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: priorattn::Error| e.to_string())
}

fn parse_shots(s: &str) -> Result<BaseShots, String> {
    s.parse().map_err(|e: priorattn::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TempArgs {
    /// Attention temperature; overrides the profile.
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long, value_enum, default_value = "mini")]
    pub profile: Profile,
}

impl TempArgs {
    pub fn resolve(&self) -> f64 {
        self.temp.unwrap_or(self.profile.temperature())
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub base_classes: usize,
    #[arg(long, default_value_t = 10)]
    pub val_classes: usize,
    #[arg(long, default_value_t = 20)]
    pub novel_classes: usize,
    #[arg(long, default_value_t = 40)]
    pub examples: usize,
    #[arg(long, default_value_t = 7)]
    pub width: usize,
    #[arg(long, default_value_t = 7)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub signal_fraction: f64,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 2.0)]
    pub clutter: f64,
    #[arg(long, default_value_t = 4)]
    pub clutter_directions: usize,
    #[arg(long, default_value_t = 6.0)]
    pub prior_contrast: f64,
    #[arg(long, default_value_t = 64)]
    pub prior_classes: usize,
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prior classifier head (FHD1).
    #[arg(long)]
    pub head: PathBuf,
    #[command(flatten)]
    pub temp: TempArgs,
    /// Attention cache to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-example PGM heatmaps.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct BaseTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Examples per base class, or "all".
    #[arg(long, value_parser = parse_shots)]
    pub k: BaseShots,
    /// Initial cosine scale.
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "sgd")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = 200)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Artifacts file to write (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prior classifier head; required when attention is on.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[command(flatten)]
    pub temp: TempArgs,
    /// Trained adapter and head from base-train.
    #[arg(long, conflicts_with = "k")]
    pub artifacts: Option<PathBuf>,
    /// Base shots to train with before evaluating, comma separated.
    #[arg(long, value_parser = parse_shots, value_delimiter = ',')]
    pub k: Vec<BaseShots>,
    /// Cosine scale; the initial value when base training.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub kprime: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 30)]
    pub queries: usize,
    #[arg(long, default_value_t = 600)]
    pub tasks: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "on")]
    pub attention: Vec<Switch>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "off")]
    pub adapt: Vec<Switch>,
    /// Adaptation learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Adaptation steps.
    #[arg(long, default_value_t = 60)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = 1e-3)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub base_momentum: f64,
    #[arg(long, default_value_t = 100)]
    pub base_steps: usize,
    #[arg(long, default_value_t = 200)]
    pub batch_size: usize,
    #[arg(long, value_parser = parse_split, default_value = "novel")]
    pub split: Split,
    /// Permute labels across classes before evaluating.
    #[arg(long)]
    pub shuffle_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Write one JSON row per grid cell to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,4,9")]
    pub locations: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4,16")]
    pub dim: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,5")]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = 120)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Offset added to the analytic gradient (for testing the harness).
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
