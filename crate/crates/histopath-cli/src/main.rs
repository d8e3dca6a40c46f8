//! `histopath` — command-line front-end for the histopath toolkit.
//!
//! Each subcommand wires one library stage to files on disk: synthetic
//! slide generation, tiling/downsampling, network training and inference,
//! probability-map postprocessing, mask blending, feature extraction and
//! boosted-tree stacking, metric evaluation, gradient checking, overlay
//! rendering, and an end-to-end `demo` walkthrough on synthetic data.
//!
//! File formats: images and label masks are PNG (masks store raw class
//! ids 0–3 in an 8-bit gray channel), probability maps use the `PMAP1`
//! container, models the `NNW1` container, and prediction matrices /
//! feature tables are CSV.
//!
//! Exit codes: 0 on success, 2 when inputs fail validation (bad flags,
//! malformed files, undefined metrics), 1 on internal errors (I/O,
//! non-finite numerics, failed gradient checks).

mod cmd;
mod config;
mod tableio;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "histopath", version, about = "Patch-based slide classification and segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide image and its ground-truth mask
    Synth(SynthArgs),
    /// Downsample an image (and optionally its mask) for full-image training
    Preprocess(PreprocessArgs),
    /// Train a patch classifier on grid patches labelled by mask majority
    TrainCls(TrainClsArgs),
    /// Train a segmentation network on random patches
    TrainSeg(TrainSegArgs),
    /// Run a trained model over an image
    Predict(PredictArgs),
    /// Paste per-patch class scores back into a full-size probability map
    Stitch(StitchArgs),
    /// Turn a probability map into a label mask
    Postprocess(PostprocessArgs),
    /// Blend probability maps
    Blend(BlendArgs),
    /// Combine a binary mask with a multiclass mask, or shift the binary mask alone
    Compose(ComposeArgs),
    /// Summarize prediction matrices into fixed-length feature rows
    Features(FeaturesArgs),
    /// Second-level boosted-tree model over prediction-derived features
    #[command(subcommand)]
    Stack(StackCommand),
    /// Score a predicted mask against ground truth
    Eval(EvalArgs),
    /// Compare a model's analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Overlay a label mask on an image (red=benign, green=in-situ, blue=invasive)
    Render(RenderArgs),
    /// End-to-end synthetic walkthrough producing a metrics report
    Demo(DemoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for slide.png and mask.png (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Base seed; the same seed reproduces the same bytes
    #[arg(long, default_value_t = histopath::synth::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    height: usize,
    #[arg(long, default_value_t = 1024)]
    width: usize,
    /// Target class fractions normal,benign,insitu,invasive (sum to 1)
    #[arg(long, value_parser = parse_priors)]
    priors: Option<[f64; 4]>,
    /// Inclusive range for bumps per class, as lo,hi
    #[arg(long, value_parser = parse_range)]
    blobs: Option<(usize, usize)>,
    /// Peak white-noise amplitude in 8-bit counts
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Integer downsampling factor (pixel-block averaging)
    #[arg(long, default_value_t = 40)]
    downsample: usize,
    /// Ground-truth mask to downsample alongside (majority vote per block)
    #[arg(long, requires = "mask_out")]
    mask: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    mask_out: Option<PathBuf>,
}

/// Training-schedule flags shared by both trainers. Anything not given
/// falls back to the `[train]` section of `--config`, then to the
/// command's defaults.
#[derive(Args)]
struct TrainFlags {
    /// Plain-text config file with [train]/[postprocess]/[stack] sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Side length of sampled square training patches
    #[arg(long)]
    patch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr0: Option<f64>,
    /// Epochs between learning-rate halvings
    #[arg(long)]
    half_period: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with the boundary-weighted loss, ramping weights over this
    /// many pixels (binary segmentation only)
    #[arg(long)]
    boundary_ramp: Option<usize>,
}

#[derive(Args)]
struct TrainClsArgs {
    /// Slide image (repeat for more training slides, paired with --mask)
    #[arg(long, required = true)]
    image: Vec<PathBuf>,
    /// Ground-truth mask for each --image, in the same order
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Patch side length for the training grid
    #[arg(long, default_value_t = 500)]
    patch: usize,
    /// Grid stride
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// conv+pool stages in the classifier
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    base_channels: usize,
    /// Pyramid-pooling depth (1 = global average pooling)
    #[arg(long, default_value_t = 2)]
    spp_levels: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct TrainSegArgs {
    /// Slide image (repeat for more training slides, paired with --mask)
    #[arg(long, required = true)]
    image: Vec<PathBuf>,
    /// Ground-truth mask for each --image, in the same order
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Encoder levels
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    /// Extra conv blocks on each skip connection (0 = plain encoder-decoder)
    #[arg(long, default_value_t = 1)]
    skip_convs: usize,
    /// Output classes; 1 trains a sigmoid tumor-map net on the binarized
    /// mask, more train a softmax net on the raw labels
    #[arg(long, default_value_t = 1)]
    classes: usize,
    /// Train on whole slides instead of sampled patches (slides must be
    /// square; defaults to 1500 epochs)
    #[arg(long, conflicts_with = "patch_size")]
    full_image: bool,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output: prediction-matrix CSV for classifiers, probability map for
    /// segmenters
    #[arg(long)]
    out: PathBuf,
    /// Patch side length (classifier models only; default 500)
    #[arg(long)]
    patch: Option<usize>,
    /// Grid stride (classifier models only; default 100)
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct StitchArgs {
    /// Prediction-matrix CSV in row-major grid order
    #[arg(long)]
    pred: PathBuf,
    /// Class column to paint (required when the matrix has several)
    #[arg(long)]
    class: Option<usize>,
    /// Height of the image the grid was cut from
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 500)]
    patch: usize,
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Output probability map
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Input probability map; single-channel maps run the blur → threshold
    /// → closing → area-filter chain, multi-channel maps take the
    /// per-pixel argmax
    #[arg(long)]
    map: PathBuf,
    /// Output label mask
    #[arg(long)]
    out: PathBuf,
    /// Config file ([postprocess] section)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gaussian blur kernel side (odd)
    #[arg(long)]
    blur_kernel: Option<usize>,
    /// Blur standard deviation (defaults to kernel/6)
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    threshold: Option<f32>,
    /// Morphological closing window side (odd)
    #[arg(long)]
    closing_size: Option<usize>,
    /// Exponent of the power-mean component-area cutoff
    #[arg(long)]
    area_power: Option<f64>,
}

#[derive(Args)]
struct BlendArgs {
    /// Probability maps to combine (two or more)
    #[arg(required = true, num_args = 2..)]
    maps: Vec<PathBuf>,
    /// Weight of the first map (pairs only); omitted = plain average
    #[arg(long)]
    weight: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComposeArgs {
    /// Binary tumor mask (labels 0/1)
    #[arg(long)]
    binary: PathBuf,
    /// Multiclass mask supplying labels inside tumor regions
    #[arg(long, required_unless_present = "shifted", conflicts_with = "shifted")]
    multi: Option<PathBuf>,
    /// Map the binary mask straight to labels {benign, invasive}
    #[arg(long)]
    shifted: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Prediction-matrix CSV; repeat for more slides — each becomes one
    /// feature row
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Output feature-table CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StackCommand {
    /// Fit a boosted-tree model on a feature table
    Train(StackTrainArgs),
    /// Backward-eliminate models by cross-validated stacking accuracy
    Select(StackSelectArgs),
    /// Predict labels for a feature table
    Predict(StackPredictArgs),
}

/// Boosting and cross-validation flags; fall back to the `[stack]`
/// section of `--config`, then to built-in defaults.
#[derive(Args)]
struct StackFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Boosting rounds
    #[arg(long)]
    rounds: Option<usize>,
    /// Tree depth
    #[arg(long)]
    depth: Option<usize>,
    /// Shrinkage
    #[arg(long)]
    eta: Option<f64>,
    /// L2 leaf regularization
    #[arg(long)]
    lambda: Option<f64>,
    /// Cross-validation folds
    #[arg(long)]
    folds: Option<usize>,
    /// Cross-validation reshuffles
    #[arg(long)]
    shuffles: Option<usize>,
    /// Cross-validation seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StackTrainArgs {
    /// Feature-table CSV (header of names, one row per sample)
    #[arg(long)]
    features: PathBuf,
    /// Label file, one integer per line
    #[arg(long)]
    labels: PathBuf,
    /// Output model JSON
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    stack: StackFlags,
}

#[derive(Args)]
struct StackSelectArgs {
    /// Per-model feature table as name=table.csv; repeat per model
    #[arg(long = "model", required = true, value_parser = parse_named_path)]
    models: Vec<(String, PathBuf)>,
    /// Label file, one integer per line
    #[arg(long)]
    labels: PathBuf,
    /// Optional file for the kept model names, one per line
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    stack: StackFlags,
}

#[derive(Args)]
struct StackPredictArgs {
    /// Model JSON from `stack train`
    #[arg(long)]
    model: PathBuf,
    /// Feature-table CSV
    #[arg(long)]
    features: PathBuf,
    /// Output label file, one integer per line
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label mask
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label mask
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    model: PathBuf,
    /// Probe input height
    #[arg(long, default_value_t = 16)]
    height: usize,
    /// Probe input width
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Probe batch size
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Seed for the random probe input
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative-error tolerance
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tint opacity over abnormal regions, 0–1
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
}

#[derive(Args)]
struct DemoArgs {
    /// Directory for the report and intermediate artifacts
    #[arg(long)]
    out: PathBuf,
    /// Base seed for every synthetic slide and training run
    #[arg(long, default_value_t = histopath::synth::DEFAULT_SEED)]
    seed: u64,
    /// Shrink slides and training schedules for quick runs
    #[arg(long)]
    toy: bool,
}

fn parse_priors(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma-separated fractions, got {}", parts.len()));
    }
    let mut out = [0.0; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("bad fraction {part:?}"))?;
    }
    Ok(out)
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let lo = lo.trim().parse().map_err(|_| format!("bad count {lo:?}"))?;
    let hi = hi.trim().parse().map_err(|_| format!("bad count {hi:?}"))?;
    Ok((lo, hi))
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=path, got {s:?}"))?;
    if name.is_empty() {
        return Err("model name must not be empty".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn run(command: Command) -> histopath::Result<()> {
    match command {
        Command::Synth(a) => cmd::data::synth(&a),
        Command::Preprocess(a) => cmd::data::preprocess(&a),
        Command::TrainCls(a) => cmd::trainer::train_cls(&a),
        Command::TrainSeg(a) => cmd::trainer::train_seg(&a),
        Command::Predict(a) => cmd::infer::predict(&a),
        Command::Stitch(a) => cmd::infer::stitch(&a),
        Command::Postprocess(a) => cmd::maps::postprocess(&a),
        Command::Blend(a) => cmd::maps::blend(&a),
        Command::Compose(a) => cmd::maps::compose(&a),
        Command::Features(a) => cmd::stacking::features(&a),
        Command::Stack(StackCommand::Train(a)) => cmd::stacking::train(&a),
        Command::Stack(StackCommand::Select(a)) => cmd::stacking::select(&a),
        Command::Stack(StackCommand::Predict(a)) => cmd::stacking::predict(&a),
        Command::Eval(a) => cmd::scoring::eval(&a),
        Command::Gradcheck(a) => cmd::scoring::gradcheck(&a),
        Command::Render(a) => cmd::data::render(&a),
        Command::Demo(a) => cmd::demo::run(&a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 2 } else { 1 });
    }
}
