//! Boundary-aware pixel weights for segmentation training.
//!
//! The weight of a pixel rises linearly with its Euclidean distance to the
//! nearest region boundary, saturating at 1 once the pixel is `ramp` pixels
//! away: `w = min(1, dist / ramp)`. Boundary pixels (those with a 4-neighbor
//! of a different label) get weight 0. A mask with no boundary at all gives
//! every pixel weight 1.
//!
//! Distances are exact: a two-pass squared distance transform (column scan,
//! then a lower-envelope-of-parabolas pass along rows).

use crate::error::{Error, Result};
use crate::image::LabelMask;

/// Stands in for "no seed anywhere near"; larger than any achievable squared
/// distance at our image sizes but still safely inside f64 range.
const FAR: f64 = 1e20;

/// Per-pixel training weights (row-major, length `h * w`).
pub fn boundary_weights(mask: &LabelMask, ramp: usize) -> Result<Vec<f32>> {
    if ramp == 0 {
        return Err(Error::validation("boundary ramp must be at least 1 pixel"));
    }
    let (h, w) = (mask.height(), mask.width());
    let seeds = boundary_pixels(mask);
    if seeds.iter().all(|s| !s) {
        return Ok(vec![1.0; h * w]);
    }
    let sq = squared_distance_transform(&seeds, h, w);
    let ramp = ramp as f64;
    Ok(sq
        .iter()
        .map(|d2| {
            let v = d2.sqrt() / ramp;
            if v > 1.0 {
                1.0
            } else {
                v as f32
            }
        })
        .collect())
}

/// Marks every pixel whose 4-neighborhood contains a different label.
fn boundary_pixels(mask: &LabelMask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let me = mask.get(y, x);
            let differs = (x > 0 && mask.get(y, x - 1) != me)
                || (x + 1 < w && mask.get(y, x + 1) != me)
                || (y > 0 && mask.get(y - 1, x) != me)
                || (y + 1 < h && mask.get(y + 1, x) != me);
            out[y * w + x] = differs;
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest seed pixel.
fn squared_distance_transform(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    // Pass 1: per column, squared distance to the nearest seed in that
    // column (two linear sweeps over integer offsets).
    let mut colsq = vec![FAR; h * w];
    for x in 0..w {
        let mut since: Option<usize> = None;
        for y in 0..h {
            if seeds[y * w + x] {
                since = Some(0);
            } else if let Some(d) = since {
                since = Some(d + 1);
            }
            if let Some(d) = since {
                colsq[y * w + x] = (d * d) as f64;
            }
        }
        since = None;
        for y in (0..h).rev() {
            if seeds[y * w + x] {
                since = Some(0);
            } else if let Some(d) = since {
                since = Some(d + 1);
            }
            if let Some(d) = since {
                let cand = (d * d) as f64;
                let cell = &mut colsq[y * w + x];
                if cand < *cell {
                    *cell = cand;
                }
            }
        }
    }
    // Pass 2: along each row, minimize (x - x')^2 + colsq(y, x') over x'.
    let mut out = vec![0.0; h * w];
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&colsq[y * w..(y + 1) * w]);
        let d = envelope_transform(&row);
        out[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    out
}

/// One-dimensional squared distance transform of a sampled function:
/// `d(q) = min_p (q - p)^2 + f(p)`, via the lower envelope of parabolas.
fn envelope_transform(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n == 1 {
        return vec![f[0]];
    }
    let mut hull = vec![0usize; n]; // parabola apexes on the envelope
    let mut cross = vec![0.0f64; n + 1]; // where consecutive parabolas swap
    let mut k = 0;
    cross[0] = f64::NEG_INFINITY;
    cross[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = hull[k];
            // Intersection of the parabolas rooted at p and q.
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * (q as f64 - p as f64));
            if s <= cross[k] {
                k -= 1; // q's parabola buries p's; cross[0] = -inf stops this
            } else {
                k += 1;
                hull[k] = q;
                cross[k] = s;
                cross[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while cross[k + 1] < q as f64 {
            k += 1;
        }
        let p = hull[k];
        let dq = q as f64 - p as f64;
        *slot = dq * dq + f[p];
    }
    out
}
