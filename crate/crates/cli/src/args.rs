use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mcivid", version, about = "Video-level MCI/NC classification from facial-feature sequences")]
pub struct Cli {
    /// Root seed of every random stream; the TS_SEED environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort of detection files with planted segment structure.
    Synth(SynthArgs),
    /// Quality gate, frame selection and main-face filtering of a cohort.
    Preprocess(PreprocessArgs),
    /// Train the convolutional autoencoder on sampled face crops.
    TrainCae(TrainCaeArgs),
    /// Encode the face frames of preprocessed videos into a latent store.
    Encode(EncodeArgs),
    /// Train one transformer on every sequence of the encoded videos.
    TrainTransformer(TrainTransformerArgs),
    /// Participant-level k-fold cross-validation.
    Evaluate(EvaluateArgs),
    /// Cross-validate a grid of configurations along one ablation axis.
    Ablate(AblateArgs),
    /// Render evaluation reports as tables and plots.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    None,
    Seq,
    Seg,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Wbce,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Channel widths reduced for CPU training.
    Desk,
    /// Full-width encoder.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Seqlen,
    Overlap,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Md,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output cohort directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub participants: usize,
    /// Fraction of participants labelled MCI.
    #[arg(long, default_value_t = 0.5)]
    pub balance: f64,
    /// Video length in frames at the target rate.
    #[arg(long, default_value_t = 3000)]
    pub frames: usize,
    /// Mean segment length of NC participants.
    #[arg(long, default_value_t = 60.0)]
    pub mu_nc: f64,
    /// Mean segment length of MCI participants.
    #[arg(long, default_value_t = 25.0)]
    pub mu_mci: f64,
    /// Offset of the MCI mean expression.
    #[arg(long, default_value_t = 0.05)]
    pub feature_shift: f64,
    /// Fraction of the full range participant face geometry and colours are drawn from.
    #[arg(long, default_value_t = 1.0)]
    pub identity_spread: f64,
    /// Mean gap between segments, in target-rate frames.
    #[arg(long, default_value_t = 10.0)]
    pub mean_gap: f64,
    /// Per-frame chance of a short detector miss inside a segment.
    #[arg(long, default_value_t = 0.01)]
    pub dropout_rate: f64,
    #[arg(long, default_value_t = 30.0)]
    pub fps_original: f64,
    #[arg(long, default_value_t = 10.0)]
    pub fps_target: f64,
    #[arg(long, default_value = "synthetic")]
    pub theme: String,
    /// Store crops as base64 inside the detection files instead of PNG sidecars.
    #[arg(long)]
    pub inline_images: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Cohort directory holding cohort.json.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory for videos.json and sequences.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Original frame rate; defaults to each video's recorded rate.
    #[arg(long)]
    pub fps_original: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    pub fps_target: f64,
    /// Region of interest as x,y,w,h in pixels.
    #[arg(long, default_value = "160,40,320,300")]
    pub roi: String,
    /// Minimum face area in square pixels.
    #[arg(long, default_value_t = 2500.0)]
    pub min_face_area: f32,
    /// Sequence size of the written sequence manifest.
    #[arg(long, default_value_t = 15)]
    pub seq_len: usize,
    /// Sequence overlap fraction of the written sequence manifest.
    #[arg(long, default_value_t = 0.0)]
    pub overlap: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCaeArgs {
    /// Preprocessing output directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Number of face crops sampled for training.
    #[arg(long, default_value_t = 200)]
    pub faces: usize,
    #[arg(long, default_value_t = 32)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    /// Preprocessing output directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Autoencoder checkpoint.
    #[arg(long)]
    pub cae: PathBuf,
    /// Output latent store.
    #[arg(long)]
    pub out: PathBuf,
    /// Only frames in segments of at least this many kept frames are encoded.
    #[arg(long, default_value_t = 15)]
    pub min_segment: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Sequence size.
    #[arg(long, default_value_t = 15)]
    pub seq_len: usize,
    /// Sequence overlap fraction in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub overlap: f64,
    #[arg(long, value_enum, default_value_t = Positions::Both)]
    pub positions: Positions,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Feed-forward width as a multiple of the hidden size.
    #[arg(long, default_value_t = 4)]
    pub ff_mult: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Loss::Wbce)]
    pub loss: Loss,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodedInputs {
    /// Preprocessing output directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Latent store written by `encode`.
    #[arg(long)]
    pub latents: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainTransformerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: EncodedInputs,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: EncodedInputs,
    /// Output report JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: EncodedInputs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Output directory for the table and the per-configuration reports.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Report JSON; repeat to add one column group per report.
    #[arg(long = "in", required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    /// Table file; printed to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for segment-trace and metric plots.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}
