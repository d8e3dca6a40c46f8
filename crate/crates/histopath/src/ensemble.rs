//! Combining model outputs: probability-map blending, binary-over-
//! multiclass composition, shifted blending, prediction averaging, and
//! stitching per-patch scores back into a slide-level map.
//!
//! The two mask-level combiners encode a fixed severity convention
//! (0 = normal .. 3 = invasive):
//!
//! * [`compose_multiclass`]: `3 * b + t * (1 - b)` — trust the binary
//!   model wherever it fires (call it invasive), fall back to the
//!   multiclass model elsewhere;
//! * [`shifted_blend`]: `1 + 2 * b` — never predict normal at all,
//!   mapping background to benign and foreground to invasive.

use crate::error::{Error, Result};
use crate::image::{LabelMask, PredMatrix, ProbMap};
use crate::tiling::PatchGrid;

fn check_map_shapes(a: &ProbMap, b: &ProbMap) -> Result<()> {
    if a.classes() != b.classes() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "map shapes differ: {}x{}x{} vs {}x{}x{}",
            a.classes(),
            a.height(),
            a.width(),
            b.classes(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Pixelwise convex combination `w * a + (1 - w) * b`.
pub fn blend_binary(a: &ProbMap, b: &ProbMap, w: f32) -> Result<ProbMap> {
    check_map_shapes(a, b)?;
    if !(0.0..=1.0).contains(&w) || !w.is_finite() {
        return Err(Error::validation(format!(
            "blend weight must lie in [0, 1], got {w}"
        )));
    }
    let values: Vec<f32> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (w as f64 * x as f64 + (1.0 - w as f64) * y as f64).clamp(0.0, 1.0) as f32)
        .collect();
    // A convex combination of per-pixel distributions is one too.
    let normalized = a.normalized() && b.normalized();
    ProbMap::new(a.classes(), a.height(), a.width(), values, normalized)
}

/// Elementwise mean of several same-shape probability maps.
pub fn average_predictions(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::validation("cannot average zero prediction maps"))?;
    for m in &maps[1..] {
        check_map_shapes(first, m)?;
    }
    let n = maps.len() as f64;
    let len = first.values().len();
    let mut acc = vec![0.0f64; len];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += v as f64;
        }
    }
    let values: Vec<f32> = acc.iter().map(|&s| (s / n).clamp(0.0, 1.0) as f32).collect();
    let normalized = maps.iter().all(|m| m.normalized());
    ProbMap::new(first.classes(), first.height(), first.width(), values, normalized)
}

fn check_mask_shapes(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `3 * b + t * (1 - b)`: invasive where the binary mask fires, the
/// multiclass label elsewhere.
pub fn compose_multiclass(binary: &LabelMask, multiclass: &LabelMask) -> Result<LabelMask> {
    check_mask_shapes(binary, multiclass)?;
    if !binary.is_binary() {
        return Err(Error::validation(
            "composition needs a binary mask in its first argument",
        ));
    }
    let labels: Vec<u8> = binary
        .labels()
        .iter()
        .zip(multiclass.labels())
        .map(|(&b, &t)| 3 * b + t * (1 - b))
        .collect();
    LabelMask::new(binary.height(), binary.width(), labels)
}

/// `1 + 2 * b`: benign where the binary mask is background, invasive
/// where it fires. The result never contains normal or in-situ labels.
pub fn shifted_blend(binary: &LabelMask) -> Result<LabelMask> {
    if !binary.is_binary() {
        return Err(Error::validation(
            "shifted blending needs a binary mask",
        ));
    }
    let labels: Vec<u8> = binary.labels().iter().map(|&b| 1 + 2 * b).collect();
    LabelMask::new(binary.height(), binary.width(), labels)
}

/// Paint per-patch scalar scores back onto the slide: each pixel gets
/// the mean score of every patch covering it, and pixels no patch
/// covers get 0.
pub fn stitch(scores: &PredMatrix, grid: &PatchGrid, height: usize, width: usize) -> Result<ProbMap> {
    if scores.classes() != 1 {
        return Err(Error::validation(format!(
            "stitching expects one score per patch, got {} columns",
            scores.classes()
        )));
    }
    if scores.rows() != grid.len() {
        return Err(Error::shape(format!(
            "{} scores for {} grid patches",
            scores.rows(),
            grid.len()
        )));
    }
    let p = grid.spec.size;
    for &(y, x) in &grid.origins {
        if y + p > height || x + p > width {
            return Err(Error::validation(format!(
                "patch at ({y}, {x}) exceeds the {height}x{width} output"
            )));
        }
    }
    let mut sums = vec![0.0f64; height * width];
    let mut cover = vec![0u32; height * width];
    for (row, &(oy, ox)) in grid.origins.iter().enumerate() {
        let s = scores.get(row, 0) as f64;
        for y in oy..oy + p {
            let base = y * width;
            for x in ox..ox + p {
                sums[base + x] += s;
                cover[base + x] += 1;
            }
        }
    }
    let values: Vec<f32> = sums
        .iter()
        .zip(&cover)
        .map(|(&s, &c)| {
            if c == 0 {
                0.0
            } else {
                (s / c as f64).clamp(0.0, 1.0) as f32
            }
        })
        .collect();
    ProbMap::new(1, height, width, values, false)
}
