use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use keyvote::geometry::CameraIntrinsics;
use keyvote::model::KeypointScheme;
use keyvote::pnp::PnpVariant;
use keyvote::voting::{VotingConfig, DEFAULT_INLIER_THRESHOLD, DEFAULT_NUM_HYPOTHESES};

#[derive(Debug, Parser)]
#[command(name = "keyvote", version, about = "Keypoint voting and uncertainty-aware PnP")]
pub struct Cli {
    /// Worker threads; defaults to the number of available cores. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select 3D keypoints on a model and print them as JSON.
    Keypoints(KeypointsArgs),
    /// Render a synthetic scene and dump its field, mask, keypoints and ground truth.
    Synth(SynthArgs),
    /// Vote keypoint distributions from a field and mask.
    Vote(VoteArgs),
    /// Vote keypoints and estimate the object pose.
    Pose(PoseArgs),
    /// Run a batch experiment and write results.csv and results.json.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Fps,
    Bbox,
}

impl From<SchemeArg> for KeypointScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Fps => KeypointScheme::Fps,
            SchemeArg::Bbox => KeypointScheme::Bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    EpnpOnly,
    Uncertainty,
    Isotropic,
}

impl From<VariantArg> for PnpVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::EpnpOnly => PnpVariant::EpnpOnly,
            VariantArg::Uncertainty => PnpVariant::Uncertainty,
            VariantArg::Isotropic => PnpVariant::Isotropic,
        }
    }
}

/// Object model plus keypoint selection.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// ASCII PLY file, or `builtin:<cube|blob|bracket>`.
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum, default_value = "fps")]
    pub scheme: SchemeArg,
    /// Surface keypoints besides the center (fps only).
    #[arg(long, default_value_t = 8)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct KeypointsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IntrinsicsArgs {
    #[arg(long)]
    pub fx: Option<f64>,
    #[arg(long)]
    pub fy: Option<f64>,
    /// Principal point; negative after a crop that moved the image origin.
    #[arg(long, allow_negative_numbers = true)]
    pub cx: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub cy: Option<f64>,
    /// Image width in pixels.
    #[arg(long)]
    pub width: Option<u32>,
    /// Image height in pixels.
    #[arg(long)]
    pub height: Option<u32>,
}

impl IntrinsicsArgs {
    /// Fills unset values from the LINEMOD camera.
    pub fn resolve(&self) -> CameraIntrinsics {
        let d = CameraIntrinsics::linemod();
        CameraIntrinsics {
            fx: self.fx.unwrap_or(d.fx),
            fy: self.fy.unwrap_or(d.fy),
            cx: self.cx.unwrap_or(d.cx),
            cy: self.cy.unwrap_or(d.cy),
            width: self.width.unwrap_or(d.width),
            height: self.height.unwrap_or(d.height),
        }
    }
}

#[derive(Debug, Args)]
pub struct VotingArgs {
    /// Hypotheses per keypoint.
    #[arg(long, default_value_t = DEFAULT_NUM_HYPOTHESES)]
    pub n_hyps: usize,
    /// Cosine threshold for a pixel to vote for a hypothesis.
    #[arg(long, default_value_t = DEFAULT_INLIER_THRESHOLD, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl VotingArgs {
    pub fn config(&self) -> VotingConfig {
        VotingConfig {
            num_hypotheses: self.n_hyps,
            inlier_threshold: self.theta,
            seed: self.seed,
            ..VotingConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Angular noise standard deviation, radians.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Fraction of field vectors replaced by random directions.
    #[arg(long, default_value_t = 0.0)]
    pub outlier_rate: f64,
    /// Fraction of object pixels hidden by a rectangle.
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    /// Crop the image so only 40–60% of the object stays visible.
    #[arg(long)]
    pub truncate: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Keypoint JSON to use instead of selecting from --scheme/--k.
    #[arg(long, conflicts_with_all = ["scheme", "k"])]
    pub keypoints: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub intrinsics: IntrinsicsArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VoteArgs {
    /// Vector field in the binary field format.
    #[arg(long)]
    pub field: PathBuf,
    /// Segmentation mask as binary PGM.
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub voting: VotingArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Keypoint JSON whose points match the field channels.
    #[arg(long)]
    pub keypoints: PathBuf,
    #[command(flatten)]
    pub voting: VotingArgs,
    #[command(flatten)]
    pub intrinsics: IntrinsicsArgs,
    #[arg(long, value_enum, default_value = "uncertainty")]
    pub variant: VariantArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Experiment config JSON. Without it, a single-cell experiment is built from the flags.
    #[arg(long, conflicts_with_all = ["model", "keypoints_scheme", "k", "sigma", "outlier_rate", "occlusion", "truncate", "trials", "n_hyps", "theta", "variant"])]
    pub config: Option<PathBuf>,
    /// ASCII PLY file, or `builtin:<cube|blob|bracket>`.
    #[arg(long, required_unless_present = "config")]
    pub model: Option<String>,
    #[arg(long = "scheme", id = "keypoints_scheme", value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    #[arg(long)]
    pub occlusion: Option<f64>,
    #[arg(long)]
    pub truncate: bool,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub n_hyps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    /// Restrict to one PnP variant; all three run by default.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "results")]
    pub out_dir: PathBuf,
}
