use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vfa::dataio::config::{NamedTemperature, TemperatureSpec};
use vfa::dataio::{ImageKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "vfa", version, about = "Vector field attention image registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Register a moving image onto a fixed image with a trained model.
    Register(RegisterArgs),
    /// Resample an image or label map through a transform.
    Warp(WarpArgs),
    /// Compute registration metrics into a CSV table.
    Evaluate(EvaluateArgs),
    /// Generate synthetic pairs with ground-truth transforms.
    Synth(SynthArgs),
    /// Dump attention statistics and heatmaps for one pair.
    Inspect(InspectArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Blobs,
    CheckerOrgans,
    Texture,
}

impl From<Kind> for ImageKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Blobs => ImageKind::Blobs,
            Kind::CheckerOrgans => ImageKind::CheckerOrgans,
            Kind::Texture => ImageKind::Texture,
        }
    }
}

/// Model and loss overrides shared by `train` and the config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// TOML run configuration; its values take precedence over flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss recipe: t1-atlas, multimodal, weakly-sup or semi-sup-tre.
    #[arg(long)]
    pub preset: Option<String>,
    /// Softmax temperature: a positive number or `sqrt_dk`.
    #[arg(long, value_parser = parse_temperature)]
    pub temperature: Option<TemperatureSpec>,
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Attention window extent per axis (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// Number of pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Extractor widths, finest first, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    pub match_channels: Option<usize>,
    /// Use one extractor per image instead of shared weights.
    #[arg(long)]
    pub separate_weights: bool,
    /// Weight of the diffusion regulariser.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Per-term weight, repeatable: `--weight ncc=1.0`.
    #[arg(long = "weight", value_parser = parse_weight)]
    pub weights: Vec<(String, f64)>,
    #[arg(long)]
    pub ncc_window: Option<usize>,
    #[arg(long)]
    pub mi_bins: Option<usize>,
    /// Integrate each level's field by scaling and squaring.
    #[arg(long)]
    pub diffeomorphic: bool,
    #[arg(long)]
    pub ss_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single worker and fixed seeds everywhere.
    #[arg(long)]
    pub deterministic: bool,
}

impl Overrides {
    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            preset: self.preset.clone(),
            temperature: self.temperature,
            beta0: self.beta0,
            window: self.window,
            levels: self.levels,
            channels: self.channels.clone(),
            match_channels: self.match_channels,
            shared_weights: self.separate_weights.then_some(false),
            lambda: self.lambda,
            weights: (!self.weights.is_empty()).then(|| self.weights.iter().cloned().collect()),
            ncc_window: self.ncc_window,
            mi_bins: self.mi_bins,
            seed: self.seed,
            deterministic: self.deterministic.then_some(true),
            diffeomorphic: self.diffeomorphic.then_some(true),
            ss_steps: self.ss_steps,
            ..Default::default()
        }
    }
}

fn parse_temperature(s: &str) -> Result<TemperatureSpec, String> {
    if s == "sqrt_dk" {
        return Ok(TemperatureSpec::Named(NamedTemperature::SqrtDk));
    }
    s.parse::<f64>()
        .map(TemperatureSpec::Fixed)
        .map_err(|_| format!("expected a number or sqrt_dk, got {s:?}"))
}

fn parse_weight(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected term=weight, got {s:?}"))?;
    let w = v.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((k.to_string(), w))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of case directories (fixed.vol, moving.vol, ...).
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long)]
    pub val_dir: Option<PathBuf>,
    /// Output directory for checkpoints, history and summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable random paired flips.
    #[arg(long)]
    pub no_flip: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Output displacement volume.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the warped moving image here.
    #[arg(long)]
    pub save_warped: Option<PathBuf>,
    /// Also write every level's transform into this directory.
    #[arg(long)]
    pub save_intermediates: Option<PathBuf>,
    /// Replace the trained β.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    /// Displacement volume.
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Treat the input as a label map (nearest neighbour).
    #[arg(long)]
    pub labels: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Displacement volume of a single case.
    #[arg(long, conflicts_with = "dataset")]
    pub transform: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Millimetres per voxel; defaults to the transform header.
    #[arg(long, value_delimiter = ',')]
    pub spacing: Option<Vec<f64>>,
    #[arg(long, default_value = "case")]
    pub case: String,
    /// Evaluate every case of a dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Register dataset cases with this model.
    #[arg(long, requires = "dataset", conflicts_with = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate each case's phi_gt.vol instead of a model.
    #[arg(long, requires = "dataset")]
    pub ground_truth: bool,
    /// Metrics CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: Kind,
    /// Image extents, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub dims: Vec<usize>,
    /// Largest displacement norm in voxels.
    #[arg(long, default_value_t = 4.0)]
    pub max_displacement: f64,
    /// Smoothing kernel width of the displacement, voxels.
    #[arg(long, default_value_t = 8.0)]
    pub smoothness: f64,
    #[arg(long, default_value_t = 16)]
    pub keypoints: usize,
    /// Millimetres per voxel written into the headers.
    #[arg(long, value_delimiter = ',')]
    pub spacing: Option<Vec<f64>>,
    /// Case `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Output directory for attention.csv and PGM heatmaps.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Image extent per axis.
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip the sign of one check's analytic gradient.
    #[arg(long)]
    pub inject: Option<String>,
    /// Run only checks whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long)]
    pub deterministic: bool,
}
