//! Data plumbing: synthetic slide generation, downsampling, overlays.

use histopath::formats::{read_image, read_mask, write_image, write_mask};
use histopath::image::Image;
use histopath::synth::{synth_slide, SynthSpec};
use histopath::tiling::{downsample, downsample_mask};
use histopath::{Error, Result};

use super::with_path;
use crate::{PreprocessArgs, RenderArgs, SynthArgs};

pub fn synth(args: &SynthArgs) -> Result<()> {
    let base = SynthSpec::default();
    let spec = SynthSpec {
        height: args.height,
        width: args.width,
        class_priors: args.priors.unwrap_or(base.class_priors),
        blob_range: args.blobs.unwrap_or(base.blob_range),
        noise_level: args.noise.unwrap_or(base.noise_level),
    };
    println!(
        "synth: {}x{} seed {} priors {:?} blobs {}..={} noise {}",
        spec.height,
        spec.width,
        args.seed,
        spec.class_priors,
        spec.blob_range.0,
        spec.blob_range.1,
        spec.noise_level
    );
    let (img, mask) = synth_slide(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let slide_path = args.out.join("slide.png");
    let mask_path = args.out.join("mask.png");
    with_path(&slide_path, write_image(&slide_path, &img))?;
    with_path(&mask_path, write_mask(&mask_path, &mask))?;
    println!("wrote {}", slide_path.display());
    println!("wrote {}", mask_path.display());
    Ok(())
}

pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let img = with_path(&args.image, read_image(&args.image))?;
    let small = downsample(&img, args.downsample)?;
    with_path(&args.out, write_image(&args.out, &small))?;
    println!(
        "wrote {} ({}x{}, downsampled {}x from {}x{})",
        args.out.display(),
        small.height(),
        small.width(),
        args.downsample,
        img.height(),
        img.width()
    );
    if let (Some(mask_in), Some(mask_out)) = (&args.mask, &args.mask_out) {
        let mask = with_path(mask_in, read_mask(mask_in))?;
        let small_mask = downsample_mask(&mask, args.downsample)?;
        with_path(mask_out, write_mask(mask_out, &small_mask))?;
        println!("wrote {}", mask_out.display());
    }
    Ok(())
}

/// Tint colors per abnormal class: benign red, in-situ green, invasive
/// blue. Normal tissue is left untouched.
const TINTS: [[f32; 3]; 3] = [
    [255.0, 0.0, 0.0],
    [0.0, 255.0, 0.0],
    [0.0, 0.0, 255.0],
];

pub fn render(args: &RenderArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Error::validation(format!(
            "alpha must be within 0..=1, got {}",
            args.alpha
        )));
    }
    let img = with_path(&args.image, read_image(&args.image))?;
    let mask = with_path(&args.mask, read_mask(&args.mask))?;
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::shape(format!(
            "image is {}x{} but mask is {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    if img.channels() != 3 {
        return Err(Error::validation(format!(
            "overlay needs a 3-channel image, got {} channels",
            img.channels()
        )));
    }
    let src = img.as_u8().ok_or_else(|| {
        Error::validation("overlay needs an 8-bit image (mean-subtracted floats cannot be tinted)")
    })?;
    let (h, w) = (img.height(), img.width());
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let class = mask.get(y, x);
            if class == 0 {
                continue;
            }
            let tint = TINTS[class as usize - 1];
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                let blended = f32::from(out[i]) * (1.0 - args.alpha) + tint[c] * args.alpha;
                out[i] = blended.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let overlay = Image::new_u8(h, w, 3, out)?;
    with_path(&args.out, write_image(&args.out, &overlay))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
