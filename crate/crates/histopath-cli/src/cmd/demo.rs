//! End-to-end walkthrough on synthetic slides.
//!
//! The demo builds the whole pipeline at desk scale: a binary tumor-map
//! network trained on random patches, a second binary network trained on
//! a downsampled copy of the slide, their blended ensemble, a four-class
//! segmentation network, and the two mask-combination strategies on top.
//! Every stage is seeded, so a rerun with the same seed reproduces
//! `report.csv` byte for byte.
//!
//! Two slides are involved: the binary nets train on a two-region slide
//! (normal vs invasive), while the four-class net trains on a separate
//! lesion-rich slide and everything is evaluated on a third slide drawn
//! from the same lesion-rich distribution.

use std::path::Path;

use histopath::ensemble::{blend_binary, compose_multiclass, shifted_blend};
use histopath::formats::{write_image, write_mask};
use histopath::image::{Image, LabelMask, ProbMap};
use histopath::metrics::seg_score;
use histopath::nn::{train_segmenter, ArchDescriptor, Graph, TNetSpec, TrainConfig};
use histopath::postprocess::{postprocess_chain, PostprocessConfig};
use histopath::rng::Rng;
use histopath::synth::{synth_slide, SynthSpec};
use histopath::tiling::downsample;
use histopath::{Error, Result};

use super::{preprocess_for_net, with_path};
use crate::DemoArgs;

/// Sizes and schedules for one demo run; `--toy` shrinks everything.
struct Scale {
    side: usize,
    down_factor: usize,
    patch_channels: usize,
    multi_channels: usize,
    down_channels: usize,
    patch_cfg: TrainConfig,
    down_cfg: TrainConfig,
    multi_cfg: TrainConfig,
}

fn scale(args: &DemoArgs) -> Scale {
    let seed = args.seed;
    let base = TrainConfig {
        lr0: 0.01,
        half_period: 20,
        boundary_ramp: None,
        ..TrainConfig::default()
    };
    if args.toy {
        Scale {
            side: 128,
            down_factor: 4,
            patch_channels: 4,
            multi_channels: 4,
            down_channels: 4,
            patch_cfg: TrainConfig {
                epochs: 6,
                steps_per_epoch: 10,
                batch_size: 2,
                patch_size: 32,
                seed,
                ..base.clone()
            },
            down_cfg: TrainConfig {
                epochs: 4,
                steps_per_epoch: 6,
                batch_size: 2,
                patch_size: 32,
                seed: seed + 2,
                ..base.clone()
            },
            multi_cfg: TrainConfig {
                epochs: 6,
                steps_per_epoch: 8,
                batch_size: 2,
                patch_size: 32,
                seed: seed + 1,
                ..base
            },
        }
    } else {
        Scale {
            side: 256,
            down_factor: 4,
            patch_channels: 8,
            multi_channels: 8,
            down_channels: 4,
            patch_cfg: TrainConfig {
                epochs: 10,
                steps_per_epoch: 20,
                batch_size: 4,
                patch_size: 48,
                seed,
                ..base.clone()
            },
            down_cfg: TrainConfig {
                epochs: 8,
                steps_per_epoch: 10,
                batch_size: 2,
                patch_size: 256 / 4,
                seed: seed + 2,
                ..base.clone()
            },
            multi_cfg: TrainConfig {
                epochs: 10,
                steps_per_epoch: 15,
                batch_size: 4,
                patch_size: 48,
                seed: seed + 1,
                ..base
            },
        }
    }
}

/// Normal-vs-invasive slide the binary tumor-map nets train on.
fn two_region_spec(side: usize) -> SynthSpec {
    SynthSpec {
        height: side,
        width: side,
        class_priors: [0.55, 0.0, 0.0, 0.45],
        blob_range: (2, 2),
        noise_level: 6.0,
    }
}

/// Lesion-rich slide distribution for the four-class net and evaluation.
fn lesion_spec(side: usize) -> SynthSpec {
    SynthSpec {
        height: side,
        width: side,
        class_priors: [0.25, 0.2, 0.15, 0.4],
        blob_range: (2, 3),
        noise_level: 6.0,
    }
}

fn train_binary(
    slide: &Image,
    mask: &LabelMask,
    base_channels: usize,
    cfg: &TrainConfig,
) -> Result<Graph<f32>> {
    let spec = TNetSpec {
        depth: 2,
        base_channels,
        skip_convs: 1,
        out_classes: 1,
    };
    let arch = ArchDescriptor::segmenter(spec, 3, true);
    let binarized = LabelMask::new(
        mask.height(),
        mask.width(),
        mask.labels().iter().map(|&l| u8::from(l > 0)).collect(),
    )?;
    let data = vec![(preprocess_for_net(slide)?, binarized)];
    let mut graph = arch.build()?;
    graph.init_weights(&mut Rng::new(cfg.seed));
    let log = train_segmenter(&mut graph, &arch, &data, cfg)?;
    println!(
        "  loss {:.4} -> {:.4} over {} steps",
        log.epoch_loss[0],
        log.epoch_loss.last().unwrap(),
        cfg.total_steps()
    );
    Ok(graph)
}

/// Score masks as a Table-2-shaped CSV row set. Binary tumor maps are
/// scored as {0, invasive} masks so the same columns apply to every row.
fn times3(mask: &LabelMask) -> Result<LabelMask> {
    LabelMask::new(
        mask.height(),
        mask.width(),
        mask.labels().iter().map(|&l| l * 3).collect(),
    )
}

fn report_row(name: &str, pred: &LabelMask, truth: &LabelMask) -> Result<String> {
    let s = seg_score(pred, truth)?;
    Ok(format!(
        "{name},{:.4},{:.4},{:.4},{:.4},{:.4}",
        s.bach, s.dice[1], s.dice[2], s.dice[3], s.dice_abnormal
    ))
}

pub fn run(args: &DemoArgs) -> Result<()> {
    let sc = scale(args);
    let seed = args.seed;
    std::fs::create_dir_all(&args.out)?;

    println!("[1/6] generating slides ({}x{}, seed {seed})", sc.side, sc.side);
    let (bin_slide, bin_mask) = synth_slide(&two_region_spec(sc.side), seed)?;
    let (fit_slide, fit_mask) = synth_slide(&lesion_spec(sc.side), seed + 1)?;
    let (eval_slide, eval_mask) = synth_slide(&lesion_spec(sc.side), seed)?;
    let slide_path = args.out.join("slide.png");
    let mask_path = args.out.join("mask.png");
    with_path(&slide_path, write_image(&slide_path, &eval_slide))?;
    with_path(&mask_path, write_mask(&mask_path, &eval_mask))?;

    println!(
        "[2/6] training patch tumor-map net ({} steps)",
        sc.patch_cfg.total_steps()
    );
    let patch_net = train_binary(&bin_slide, &bin_mask, sc.patch_channels, &sc.patch_cfg)?;

    println!(
        "[3/6] training downsampled full-image tumor-map net ({} steps, {}x smaller)",
        sc.down_cfg.total_steps(),
        sc.down_factor
    );
    let bin_small = downsample(&bin_slide, sc.down_factor)?;
    let bin_mask_small = histopath::tiling::downsample_mask(&bin_mask, sc.down_factor)?;
    let down_net = train_binary(&bin_small, &bin_mask_small, sc.down_channels, &sc.down_cfg)?;

    println!(
        "[4/6] training four-class net ({} steps)",
        sc.multi_cfg.total_steps()
    );
    let multi_spec = TNetSpec {
        depth: 2,
        base_channels: sc.multi_channels,
        skip_convs: 1,
        out_classes: 4,
    };
    let multi_arch = ArchDescriptor::segmenter(multi_spec, 3, false);
    let mut multi_net = multi_arch.build()?;
    multi_net.init_weights(&mut Rng::new(sc.multi_cfg.seed));
    let fit_data = vec![(preprocess_for_net(&fit_slide)?, fit_mask)];
    let log = train_segmenter(&mut multi_net, &multi_arch, &fit_data, &sc.multi_cfg)?;
    println!(
        "  loss {:.4} -> {:.4} over {} steps",
        log.epoch_loss[0],
        log.epoch_loss.last().unwrap(),
        sc.multi_cfg.total_steps()
    );

    println!("[5/6] predicting and combining on the held-out slide");
    let pre_eval = preprocess_for_net(&eval_slide)?;
    let map_patch = histopath::nn::predict_probmap(&patch_net, &pre_eval)?;
    let eval_small = downsample(&eval_slide, sc.down_factor)?;
    let map_down: ProbMap = histopath::nn::predict_probmap(&down_net, &preprocess_for_net(&eval_small)?)?
        .upsample_nearest(sc.down_factor)?;
    let map_blend = blend_binary(&map_patch, &map_down, 0.5)?;

    let pp = PostprocessConfig::default();
    let b_patch = postprocess_chain(&map_patch, &pp)?;
    let b_down = postprocess_chain(&map_down, &pp)?;
    let b_blend = postprocess_chain(&map_blend, &pp)?;
    let multi_mask = histopath::nn::predict_probmap(&multi_net, &pre_eval)?.argmax_mask()?;
    let composed = compose_multiclass(&b_blend, &multi_mask)?;
    let shifted = shifted_blend(&b_blend)?;

    println!("[6/6] scoring and writing the report");
    let rows: Vec<(&str, LabelMask)> = vec![
        ("tnet-patch", times3(&b_patch)?),
        ("tnet-downsampled", times3(&b_down)?),
        ("binary-ensemble", times3(&b_blend)?),
        ("tnet-multiclass", multi_mask),
        ("composed-ensemble", composed),
        ("shifted-blend", shifted),
    ];
    let mut csv = String::from("network,bach_score,dice_benign,dice_insitu,dice_invasive,dice_abnormal\n");
    for (name, mask) in &rows {
        let row = report_row(name, mask, &eval_mask)?;
        println!("  {row}");
        csv.push_str(&row);
        csv.push('\n');
        let mask_path = args.out.join(format!("{name}.png"));
        with_path(&mask_path, write_mask(&mask_path, mask))?;
    }
    let report_path = args.out.join("report.csv");
    write_text(&report_path, &csv)?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
