//! Model training commands.

use std::path::PathBuf;

use histopath::formats::{read_image, read_mask};
use histopath::image::{Image, LabelMask, NUM_CLASSES};
use histopath::nn::{
    save_model, train_classifier, train_segmenter, ArchDescriptor, ClassifierSpec, ModelBundle,
    TNetSpec, TrainConfig, TrainLog,
};
use histopath::rng::Rng;
use histopath::tiling::{crop, crop_mask, grid_patches, PatchSpec};
use histopath::{Error, Result};

use super::{preprocess_for_net, with_path};
use crate::config::{resolve_train, FileConfig};
use crate::{TrainClsArgs, TrainSegArgs};

/// Paper-era defaults for patch-based segmentation training.
fn seg_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 150,
        batch_size: 40,
        patch_size: 300,
        ..TrainConfig::default()
    }
}

/// Full-image runs train far longer on far fewer distinct inputs.
const FULL_IMAGE_EPOCHS: usize = 1500;

fn load_pairs(images: &[PathBuf], masks: &[PathBuf]) -> Result<Vec<(Image, LabelMask)>> {
    if images.len() != masks.len() {
        return Err(Error::validation(format!(
            "{} --image flags but {} --mask flags; they pair up in order",
            images.len(),
            masks.len()
        )));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (ipath, mpath) in images.iter().zip(masks) {
        let img = with_path(ipath, read_image(ipath))?;
        let mask = with_path(mpath, read_mask(mpath))?;
        if img.height() != mask.height() || img.width() != mask.width() {
            return Err(Error::shape(format!(
                "{} is {}x{} but {} is {}x{}",
                ipath.display(),
                img.height(),
                img.width(),
                mpath.display(),
                mask.height(),
                mask.width()
            )));
        }
        pairs.push((preprocess_for_net(&img)?, mask));
    }
    Ok(pairs)
}

fn binarize(mask: &LabelMask) -> Result<LabelMask> {
    let labels = mask.labels().iter().map(|&l| u8::from(l > 0)).collect();
    LabelMask::new(mask.height(), mask.width(), labels)
}

fn print_log(log: &TrainLog) {
    for (e, loss) in log.epoch_loss.iter().enumerate() {
        println!("epoch {}/{} loss {loss:.4}", e + 1, log.epoch_loss.len());
    }
}

pub fn train_seg(args: &TrainSegArgs) -> Result<()> {
    let file = FileConfig::load_opt(args.train.config.as_deref())?;
    let mut base = seg_defaults();
    let mut pairs = load_pairs(&args.image, &args.mask)?;
    if args.full_image {
        let side = pairs[0].0.height();
        for (img, _) in &pairs {
            if img.height() != side || img.width() != side {
                return Err(Error::validation(format!(
                    "--full-image needs square slides of one size; got {}x{} next to {side}x{side}",
                    img.height(),
                    img.width()
                )));
            }
        }
        base.patch_size = side;
        base.epochs = FULL_IMAGE_EPOCHS;
    }
    let cfg = resolve_train(&base, &file, &args.train)?;

    let spec = TNetSpec {
        depth: args.depth,
        base_channels: args.base_channels,
        skip_convs: args.skip_convs,
        out_classes: args.classes,
    };
    let binary = args.classes == 1;
    let arch = ArchDescriptor::segmenter(spec, 3, binary);
    arch.validate()?;
    println!("arch: {arch}");
    if binary {
        for (_, mask) in &mut pairs {
            *mask = binarize(mask)?;
        }
    }

    let mut graph = arch.build()?;
    graph.init_weights(&mut Rng::new(cfg.seed));
    let log = train_segmenter(&mut graph, &arch, &pairs, &cfg)?;
    print_log(&log);
    let bundle = ModelBundle::from_graph(arch, &graph)?;
    with_path(&args.out, save_model(&args.out, &bundle))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Label a patch by the most common class inside it; ties go to the
/// lower class id.
fn majority_label(mask: &LabelMask) -> usize {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in mask.labels() {
        counts[l as usize] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

pub fn train_cls(args: &TrainClsArgs) -> Result<()> {
    let file = FileConfig::load_opt(args.train.config.as_deref())?;
    let cfg = resolve_train(&seg_defaults(), &file, &args.train)?;
    let pairs = load_pairs(&args.image, &args.mask)?;

    let spec = PatchSpec::new(args.patch, args.stride)?;
    let mut data: Vec<(Image, usize)> = Vec::new();
    for (img, mask) in &pairs {
        let grid = grid_patches(img.height(), img.width(), spec)?;
        for &(y0, x0) in &grid.origins {
            let patch = crop(img, y0, x0, args.patch, args.patch)?;
            let label = majority_label(&crop_mask(mask, y0, x0, args.patch, args.patch)?);
            data.push((patch, label));
        }
    }
    println!("training patches: {}", data.len());

    let spec = ClassifierSpec {
        blocks: args.blocks,
        base_channels: args.base_channels,
        spp_levels: args.spp_levels,
        classes: args.classes,
    };
    let arch = ArchDescriptor::classifier(spec, 3);
    arch.validate()?;
    println!("arch: {arch}");

    let mut graph = arch.build()?;
    graph.init_weights(&mut Rng::new(cfg.seed));
    let log = train_classifier(&mut graph, &arch, &data, &cfg)?;
    print_log(&log);
    let bundle = ModelBundle::from_graph(arch, &graph)?;
    with_path(&args.out, save_model(&args.out, &bundle))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
