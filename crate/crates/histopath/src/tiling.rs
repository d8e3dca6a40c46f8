//! Tiling and preprocessing: mean subtraction, block-mean downsampling,
//! and patch extraction (random or on a regular grid).

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, Samples, NUM_CLASSES};
use crate::rng::Rng;

/// Where channel-mean subtraction happens in a pipeline: once over the
/// whole slide before patches are cut, or independently on every patch
/// after cutting. The arithmetic is the same either way; the scope
/// decides which buffer [`mean_subtract`] is handed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanScope {
    WholeImage,
    PerPatch,
}

impl std::str::FromStr for MeanScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole-image" => Ok(MeanScope::WholeImage),
            "per-patch" => Ok(MeanScope::PerPatch),
            other => Err(Error::validation(format!(
                "unknown mean scope {other:?}: expected whole-image or per-patch"
            ))),
        }
    }
}

impl std::fmt::Display for MeanScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeanScope::WholeImage => "whole-image",
            MeanScope::PerPatch => "per-patch",
        })
    }
}

/// Subtract each channel's mean from that channel, producing a float
/// image with (numerically) zero channel means.
///
/// Handing this a full slide implements whole-image scope; handing it
/// one patch implements per-patch scope. Approximately idempotent: a
/// second application only removes the rounding residue of the first.
pub fn mean_subtract(img: &Image) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut sums = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += img.sample(y, x, ch) as f64;
            }
        }
    }
    let n = (h * w) as f64;
    let means: Vec<f32> = sums.iter().map(|s| (s / n) as f32).collect();
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y * w + x) * c + ch] = img.sample(y, x, ch) - means[ch];
            }
        }
    }
    Image::new_f32(h, w, c, data).expect("means of finite samples are finite")
}

/// Multiply every sample by a constant, producing a float image. Used to
/// bring pixel values into a range friendly to network training (e.g.
/// 1/255 after mean subtraction).
pub fn scale_values(img: &Image, factor: f32) -> Result<Image> {
    if !factor.is_finite() {
        return Err(Error::validation(format!("scale factor {factor} is not finite")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y * w + x) * c + ch] = img.sample(y, x, ch) * factor;
            }
        }
    }
    Image::new_f32(h, w, c, data)
}

/// Block-mean downsample by an integer factor. Output dimensions are
/// `ceil(dim / factor)`; edge blocks shrink to whatever remains in
/// bounds. 8-bit input stays 8-bit (rounded), float stays float.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::validation("downsample factor must be positive"));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut means = vec![0.0f64; oh * ow * c];
    for oy in 0..oh {
        let y0 = oy * factor;
        let y1 = (y0 + factor).min(h);
        for ox in 0..ow {
            let x0 = ox * factor;
            let x1 = (x0 + factor).min(w);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut sum = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += img.sample(y, x, ch) as f64;
                    }
                }
                means[(oy * ow + ox) * c + ch] = sum / count;
            }
        }
    }
    match img.samples() {
        Samples::U8(_) => {
            let data = means.iter().map(|&m| m.round().clamp(0.0, 255.0) as u8).collect();
            Image::new_u8(oh, ow, c, data)
        }
        Samples::F32(_) => Image::new_f32(oh, ow, c, means.iter().map(|&m| m as f32).collect()),
    }
}

/// Downsample a label mask by majority vote over each block; ties go to
/// the smallest class id.
pub fn downsample_mask(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 {
        return Err(Error::validation("downsample factor must be positive"));
    }
    let (h, w) = (mask.height(), mask.width());
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut labels = vec![0u8; oh * ow];
    for oy in 0..oh {
        let y0 = oy * factor;
        let y1 = (y0 + factor).min(h);
        for ox in 0..ow {
            let x0 = ox * factor;
            let x1 = (x0 + factor).min(w);
            let mut counts = [0usize; NUM_CLASSES];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[mask.get(y, x) as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &count) in counts.iter().enumerate() {
                if count > counts[best] {
                    best = c;
                }
            }
            labels[oy * ow + ox] = best as u8;
        }
    }
    LabelMask::new(oh, ow, labels)
}

/// Square patch geometry: side length and grid stride, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::validation(format!(
                "patch size and stride must be positive, got size {size}, stride {stride}"
            )));
        }
        Ok(PatchSpec { size, stride })
    }
}

/// Regular grid of patch origins covering an image, without padding:
/// only fully in-bounds patches are listed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub spec: PatchSpec,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `(y, x)` origins in row-major grid order.
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Enumerate the grid of fully in-bounds patch origins:
/// `floor((H - p) / s) + 1` rows by `floor((W - p) / s) + 1` columns.
pub fn grid_patches(height: usize, width: usize, spec: PatchSpec) -> Result<PatchGrid> {
    if spec.size > height || spec.size > width {
        return Err(Error::validation(format!(
            "patch size {} exceeds image dimensions {height}x{width}",
            spec.size
        )));
    }
    let grid_rows = (height - spec.size) / spec.stride + 1;
    let grid_cols = (width - spec.size) / spec.stride + 1;
    let mut origins = Vec::with_capacity(grid_rows * grid_cols);
    for gy in 0..grid_rows {
        for gx in 0..grid_cols {
            origins.push((gy * spec.stride, gx * spec.stride));
        }
    }
    Ok(PatchGrid {
        spec,
        grid_rows,
        grid_cols,
        origins,
    })
}

/// Draw a patch origin uniformly from all in-bounds positions
/// (`(H - p + 1) * (W - p + 1)` possibilities).
pub fn random_patch(height: usize, width: usize, size: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if size == 0 {
        return Err(Error::validation("patch size must be positive"));
    }
    if size > height || size > width {
        return Err(Error::validation(format!(
            "patch size {size} exceeds image dimensions {height}x{width}"
        )));
    }
    let y = rng.below(height - size + 1);
    let x = rng.below(width - size + 1);
    Ok((y, x))
}

/// Copy a rectangular window out of an image.
pub fn crop(img: &Image, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
    if y0 + height > img.height() || x0 + width > img.width() {
        return Err(Error::validation(format!(
            "crop {height}x{width}+{y0}+{x0} exceeds image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    match img.samples() {
        Samples::U8(data) => {
            let mut out = Vec::with_capacity(height * width * c);
            for y in y0..y0 + height {
                let start = (y * img.width() + x0) * c;
                out.extend_from_slice(&data[start..start + width * c]);
            }
            Image::new_u8(height, width, c, out)
        }
        Samples::F32(data) => {
            let mut out = Vec::with_capacity(height * width * c);
            for y in y0..y0 + height {
                let start = (y * img.width() + x0) * c;
                out.extend_from_slice(&data[start..start + width * c]);
            }
            Image::new_f32(height, width, c, out)
        }
    }
}

/// Copy a rectangular window out of a label mask.
pub fn crop_mask(mask: &LabelMask, y0: usize, x0: usize, height: usize, width: usize) -> Result<LabelMask> {
    if y0 + height > mask.height() || x0 + width > mask.width() {
        return Err(Error::validation(format!(
            "crop {height}x{width}+{y0}+{x0} exceeds mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = Vec::with_capacity(height * width);
    for y in y0..y0 + height {
        let start = y * mask.width() + x0;
        out.extend_from_slice(&mask.labels()[start..start + width]);
    }
    LabelMask::new(height, width, out)
}
