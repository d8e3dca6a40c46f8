//! Core raster types: images, label masks, probability maps, and
//! per-patch prediction matrices.
//!
//! Conventions used throughout the crate:
//! * images are row-major with interleaved channels (`(y * w + x) * c + ch`);
//! * label masks hold one tissue class per pixel, `0..=3`;
//! * probability maps are channel-major (`(ch * h + y) * w + x`) with
//!   every value in `[0, 1]`;
//! * prediction matrices are row-major, one row per patch, one column
//!   per class.

use crate::error::{Error, Result};

/// Number of tissue classes.
pub const NUM_CLASSES: usize = 4;

/// Class names in label order: 0 = Normal, 1 = Benign, 2 = InSitu,
/// 3 = Invasive.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "benign", "insitu", "invasive"];

/// Pixel storage for [`Image`]: raw 8-bit samples straight from disk,
/// or 32-bit floats after preprocessing (mean subtraction, averaging).
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A raster image with 1 (grayscale) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    samples: Samples,
}

impl Image {
    pub fn new_u8(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        Self::check_dims(height, width, channels, data.len())?;
        Ok(Image {
            height,
            width,
            channels,
            samples: Samples::U8(data),
        })
    }

    pub fn new_f32(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::check_dims(height, width, channels, data.len())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "image sample {bad} is not finite"
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            samples: Samples::F32(data),
        })
    }

    fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::validation(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if len != expected {
            return Err(Error::shape(format!(
                "sample buffer holds {len} values, {height}x{width}x{channels} needs {expected}"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn is_u8(&self) -> bool {
        matches!(self.samples, Samples::U8(_))
    }

    /// Sample value as `f32` regardless of storage (8-bit values are
    /// returned unscaled, `0.0..=255.0`).
    pub fn sample(&self, y: usize, x: usize, ch: usize) -> f32 {
        let i = (y * self.width + x) * self.channels + ch;
        match &self.samples {
            Samples::U8(v) => v[i] as f32,
            Samples::F32(v) => v[i],
        }
    }

    /// Float view of the samples, converting 8-bit data on the fly.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.samples {
            Samples::U8(v) => v.iter().map(|&b| b as f32).collect(),
            Samples::F32(v) => v.clone(),
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.samples {
            Samples::U8(v) => Some(v),
            Samples::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.samples {
            Samples::F32(v) => Some(v),
            Samples::U8(_) => None,
        }
    }
}

/// Per-pixel tissue labels, one byte per pixel, values `0..=3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label buffer holds {} values, {height}x{width} needs {}",
                labels.len(),
                height * width
            )));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &v)| v as usize >= NUM_CLASSES)
        {
            return Err(Error::validation(format!(
                "label {bad} at pixel {i} is outside 0..={}",
                NUM_CLASSES - 1
            )));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    /// All-zero (Normal) mask.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        assert!((v as usize) < NUM_CLASSES, "label {v} out of range");
        self.labels[y * self.width + x] = v;
    }

    /// True when every label is 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    /// Fraction of pixels carrying each class.
    pub fn class_frequencies(&self) -> [f64; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        let n = self.labels.len() as f64;
        let mut freq = [0.0; NUM_CLASSES];
        for (f, c) in freq.iter_mut().zip(counts) {
            *f = c as f64 / n;
        }
        freq
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<LabelMask> {
        if factor == 0 {
            return Err(Error::validation("upsample factor must be positive"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            let sy = y / factor;
            for x in 0..w {
                out[y * w + x] = self.labels[sy * self.width + x / factor];
            }
        }
        LabelMask::new(h, w, out)
    }
}

/// Per-pixel class probabilities, channel-major.
///
/// `normalized` records whether the channels are meant to form a
/// distribution per pixel (softmax output); a single-channel map from a
/// binary model is a plain foreground probability and is not.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl ProbMap {
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
        normalized: bool,
    ) -> Result<Self> {
        if classes == 0 || height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "probability map dimensions must be positive, got {classes}x{height}x{width}"
            )));
        }
        if values.len() != classes * height * width {
            return Err(Error::shape(format!(
                "value buffer holds {} floats, {classes}x{height}x{width} needs {}",
                values.len(),
                classes * height * width
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "probability {v} at index {i} is outside [0, 1]"
                )));
            }
        }
        let map = ProbMap {
            classes,
            height,
            width,
            values,
            normalized,
        };
        if normalized {
            map.check_normalized()?;
        }
        Ok(map)
    }

    fn check_normalized(&self) -> Result<()> {
        for y in 0..self.height {
            for x in 0..self.width {
                let s: f32 = (0..self.classes).map(|c| self.get(c, y, x)).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(Error::validation(format!(
                        "channel sum {s} at pixel ({y}, {x}) is not 1 within 1e-5"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f32 {
        self.values[(class * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax_mask(&self) -> Result<LabelMask> {
        if self.classes > NUM_CLASSES {
            return Err(Error::validation(format!(
                "cannot build a label mask from {} channels",
                self.classes
            )));
        }
        let mut labels = vec![0u8; self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                let (mut best_c, mut best_v) = (0usize, self.get(0, y, x));
                for c in 1..self.classes {
                    let v = self.get(c, y, x);
                    if v > best_v {
                        best_v = v;
                        best_c = c;
                    }
                }
                labels[y * self.width + x] = best_c as u8;
            }
        }
        LabelMask::new(self.height, self.width, labels)
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<ProbMap> {
        if factor == 0 {
            return Err(Error::validation("upsample factor must be positive"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = vec![0.0f32; self.classes * h * w];
        for c in 0..self.classes {
            for y in 0..h {
                for x in 0..w {
                    out[(c * h + y) * w + x] = self.get(c, y / factor, x / factor);
                }
            }
        }
        ProbMap::new(self.classes, h, w, out, self.normalized)
    }
}

/// Per-patch class probabilities: one row per patch, one column per
/// class (a single column for binary foreground scores).
#[derive(Debug, Clone, PartialEq)]
pub struct PredMatrix {
    rows: usize,
    classes: usize,
    values: Vec<f32>,
}

impl PredMatrix {
    pub fn new(rows: usize, classes: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || classes == 0 {
            return Err(Error::validation(format!(
                "prediction matrix dimensions must be positive, got {rows}x{classes}"
            )));
        }
        if values.len() != rows * classes {
            return Err(Error::shape(format!(
                "value buffer holds {} floats, {rows}x{classes} needs {}",
                values.len(),
                rows * classes
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "prediction {v} at index {i} is outside [0, 1]"
                )));
            }
        }
        Ok(PredMatrix {
            rows,
            classes,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, class: usize) -> f32 {
        self.values[row * self.classes + class]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.classes..(row + 1) * self.classes]
    }

    /// Per-row argmax labels; ties go to the lowest class index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_dimension_checks() {
        assert!(Image::new_u8(0, 4, 3, vec![]).is_err());
        assert!(Image::new_u8(2, 2, 2, vec![0; 8]).is_err());
        assert!(Image::new_u8(2, 2, 3, vec![0; 11]).is_err());
        assert!(Image::new_u8(2, 2, 3, vec![0; 12]).is_ok());
    }

    #[test]
    fn float_image_rejects_nan() {
        let mut data = vec![0.0f32; 12];
        data[5] = f32::NAN;
        assert!(matches!(
            Image::new_f32(2, 2, 3, data),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mask_rejects_out_of_range_labels() {
        let err = LabelMask::new(1, 3, vec![0, 4, 1]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains('4'));
    }

    #[test]
    fn mask_frequencies_sum_to_one() {
        let m = LabelMask::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let f = m.class_frequencies();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(f, [0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn probmap_rejects_out_of_range() {
        assert!(ProbMap::new(1, 1, 2, vec![0.5, 1.2], false).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![0.5, -0.1], false).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![0.5, 1.0], false).is_ok());
    }

    #[test]
    fn probmap_normalization_flag_enforced() {
        // Two channels summing to 0.8: fine unnormalized, rejected when flagged.
        let vals = vec![0.5, 0.5, 0.3, 0.3];
        assert!(ProbMap::new(2, 1, 2, vals.clone(), false).is_ok());
        assert!(ProbMap::new(2, 1, 2, vals, true).is_err());
        assert!(ProbMap::new(2, 1, 2, vec![0.5, 0.9, 0.5, 0.1], true).is_ok());
    }

    #[test]
    fn probmap_argmax_prefers_lowest_on_tie() {
        let m = ProbMap::new(2, 1, 1, vec![0.5, 0.5], true).unwrap();
        assert_eq!(m.argmax_mask().unwrap().get(0, 0), 0);
    }

    #[test]
    fn probmap_upsample_replicates_blocks() {
        let m = ProbMap::new(1, 1, 2, vec![0.25, 0.75], false).unwrap();
        let up = m.upsample_nearest(2).unwrap();
        assert_eq!(up.height(), 2);
        assert_eq!(up.width(), 4);
        assert_eq!(up.get(0, 1, 0), 0.25);
        assert_eq!(up.get(0, 1, 3), 0.75);
    }

    #[test]
    fn predmatrix_argmax_labels() {
        let m = PredMatrix::new(2, 3, vec![0.1, 0.7, 0.2, 0.6, 0.3, 0.1]).unwrap();
        assert_eq!(m.argmax_labels(), vec![1, 0]);
    }
}
