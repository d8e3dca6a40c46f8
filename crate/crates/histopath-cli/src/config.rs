//! Plain-text run configuration.
//!
//! The file is `key = value` lines grouped under `[train]`,
//! `[postprocess]` and `[stack]` section headers; `#` starts a comment.
//! Unknown sections or keys are rejected outright — a typo should fail
//! the run, not silently fall back to a default. Values from the file
//! sit between the built-in defaults and the command-line flags:
//! defaults < file < flags. Every resolved value is echoed to stdout so
//! run logs capture the effective configuration verbatim.

use std::collections::BTreeMap;
use std::path::Path;

use histopath::nn::TrainConfig;
use histopath::postprocess::PostprocessConfig;
use histopath::stacking::{CvPlan, GbtParams};
use histopath::{Error, Result};

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "patch_size",
    "lr0",
    "half_period",
    "seed",
    "boundary_ramp",
];
const POSTPROCESS_KEYS: &[&str] = &[
    "blur_kernel",
    "blur_sigma",
    "threshold",
    "closing_size",
    "area_power",
];
const STACK_KEYS: &[&str] = &["rounds", "depth", "eta", "lambda", "folds", "shuffles", "seed"];

/// Parsed config file: raw string values per section, validated against
/// the known key lists but not yet typed.
#[derive(Debug, Default)]
pub struct FileConfig {
    train: BTreeMap<String, String>,
    postprocess: BTreeMap<String, String>,
    stack: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        parse(&text).map_err(|e| match e {
            Error::Validation(m) => Error::validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Load `--config` if given, otherwise an empty config.
    pub fn load_opt(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            Some(p) => FileConfig::load(p),
            None => Ok(FileConfig::default()),
        }
    }

    fn section(&self, name: &str) -> &BTreeMap<String, String> {
        match name {
            "train" => &self.train,
            "postprocess" => &self.postprocess,
            "stack" => &self.stack,
            _ => unreachable!("section names are fixed"),
        }
    }

    /// Typed lookup of `section.key`, applied only when present.
    fn get<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.section(section).get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::validation(format!("config {section}.{key}: cannot parse {raw:?}"))
            }),
        }
    }
}

fn parse(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut section: Option<(&str, &[&str])> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = match raw_line.split_once('#') {
            Some((code, _comment)) => code.trim(),
            None => raw_line.trim(),
        };
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(match name {
                "train" => ("train", TRAIN_KEYS),
                "postprocess" => ("postprocess", POSTPROCESS_KEYS),
                "stack" => ("stack", STACK_KEYS),
                other => {
                    return Err(Error::validation(format!(
                        "line {lineno}: unknown section [{other}] (expected train, postprocess or stack)"
                    )))
                }
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::validation(format!(
                "line {lineno}: expected `key = value`, got {line:?}"
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some((name, keys)) = section else {
            return Err(Error::validation(format!(
                "line {lineno}: key {key:?} appears before any section header"
            )));
        };
        if !keys.contains(&key) {
            return Err(Error::validation(format!(
                "line {lineno}: unknown key {key:?} in [{name}] (expected one of {})",
                keys.join(", ")
            )));
        }
        if value.is_empty() {
            return Err(Error::validation(format!("line {lineno}: key {key:?} has no value")));
        }
        let map = match name {
            "train" => &mut cfg.train,
            "postprocess" => &mut cfg.postprocess,
            _ => &mut cfg.stack,
        };
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::validation(format!(
                "line {lineno}: key {key:?} given twice in [{name}]"
            )));
        }
    }
    Ok(cfg)
}

fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Resolve a training schedule from defaults, file and flags, then echo
/// every field. `base` carries the command's own defaults (they differ
/// between commands).
pub fn resolve_train(
    base: &TrainConfig,
    file: &FileConfig,
    flags: &crate::TrainFlags,
) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: pick(flags.epochs, file.get("train", "epochs")?, base.epochs),
        steps_per_epoch: pick(
            flags.steps_per_epoch,
            file.get("train", "steps_per_epoch")?,
            base.steps_per_epoch,
        ),
        batch_size: pick(flags.batch_size, file.get("train", "batch_size")?, base.batch_size),
        patch_size: pick(flags.patch_size, file.get("train", "patch_size")?, base.patch_size),
        lr0: pick(flags.lr0, file.get("train", "lr0")?, base.lr0),
        half_period: pick(flags.half_period, file.get("train", "half_period")?, base.half_period),
        seed: pick(flags.seed, file.get("train", "seed")?, base.seed),
        boundary_ramp: flags
            .boundary_ramp
            .or(file.get("train", "boundary_ramp")?)
            .or(base.boundary_ramp),
    };
    cfg.validate()?;
    println!("config train.epochs = {}", cfg.epochs);
    println!("config train.steps_per_epoch = {}", cfg.steps_per_epoch);
    println!("config train.batch_size = {}", cfg.batch_size);
    println!("config train.patch_size = {}", cfg.patch_size);
    println!("config train.lr0 = {}", cfg.lr0);
    println!("config train.half_period = {}", cfg.half_period);
    println!("config train.seed = {}", cfg.seed);
    match cfg.boundary_ramp {
        Some(d) => println!("config train.boundary_ramp = {d}"),
        None => println!("config train.boundary_ramp = off"),
    }
    Ok(cfg)
}

/// Resolve the postprocessing chain parameters and echo them.
pub fn resolve_postprocess(file: &FileConfig, args: &crate::PostprocessArgs) -> Result<PostprocessConfig> {
    let base = PostprocessConfig::default();
    let cfg = PostprocessConfig {
        blur_kernel: pick(args.blur_kernel, file.get("postprocess", "blur_kernel")?, base.blur_kernel),
        blur_sigma: args
            .blur_sigma
            .or(file.get("postprocess", "blur_sigma")?)
            .or(base.blur_sigma),
        threshold: pick(args.threshold, file.get("postprocess", "threshold")?, base.threshold),
        closing_size: pick(
            args.closing_size,
            file.get("postprocess", "closing_size")?,
            base.closing_size,
        ),
        area_power: pick(args.area_power, file.get("postprocess", "area_power")?, base.area_power),
    };
    cfg.validate()?;
    println!("config postprocess.blur_kernel = {}", cfg.blur_kernel);
    println!(
        "config postprocess.blur_sigma = {} (effective {})",
        cfg.blur_sigma.map_or("auto".to_string(), |s| s.to_string()),
        cfg.effective_sigma()
    );
    println!("config postprocess.threshold = {}", cfg.threshold);
    println!("config postprocess.closing_size = {}", cfg.closing_size);
    println!("config postprocess.area_power = {}", cfg.area_power);
    Ok(cfg)
}

/// Resolve boosting parameters and the cross-validation plan, echoing
/// both. Commands that only fit a model ignore the plan half.
pub fn resolve_stack(file: &FileConfig, flags: &crate::StackFlags) -> Result<(GbtParams, CvPlan)> {
    let pb = GbtParams::default();
    let params = GbtParams {
        rounds: pick(flags.rounds, file.get("stack", "rounds")?, pb.rounds),
        depth: pick(flags.depth, file.get("stack", "depth")?, pb.depth),
        eta: pick(flags.eta, file.get("stack", "eta")?, pb.eta),
        lambda: pick(flags.lambda, file.get("stack", "lambda")?, pb.lambda),
    };
    params.validate()?;
    let cb = CvPlan::default();
    let plan = CvPlan {
        folds: pick(flags.folds, file.get("stack", "folds")?, cb.folds),
        shuffles: pick(flags.shuffles, file.get("stack", "shuffles")?, cb.shuffles),
        seed: pick(flags.seed, file.get("stack", "seed")?, cb.seed),
    };
    plan.validate()?;
    println!("config stack.rounds = {}", params.rounds);
    println!("config stack.depth = {}", params.depth);
    println!("config stack.eta = {}", params.eta);
    println!("config stack.lambda = {}", params.lambda);
    println!("config stack.folds = {}", plan.folds);
    println!("config stack.shuffles = {}", plan.shuffles);
    println!("config stack.seed = {}", plan.seed);
    Ok((params, plan))
}
