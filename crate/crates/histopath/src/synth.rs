//! Synthetic slide generation.
//!
//! Real annotated slides are enormous and scarce, so the toolkit ships
//! a generator that produces stained-tissue lookalikes at any size with
//! pixel-perfect ground truth. Abnormal regions are grown as superlevel
//! sets of smooth random bump fields: for each class, the top `p * n`
//! unclaimed pixels of its field are claimed, which pins the empirical
//! class frequencies to the requested priors up to rounding while still
//! producing organic blob shapes. The image is a per-class stain
//! palette modulated by a smooth brightness field plus white noise.

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, NUM_CLASSES};
use crate::rng::Rng;

/// Slide seed used by tools when none is given, so casual runs are
/// comparable across machines.
pub const DEFAULT_SEED: u64 = 7;

/// Parameters for [`synth_slide`].
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Target fraction of pixels per class; must be non-negative and
    /// sum to 1 within 1e-9.
    pub class_priors: [f64; NUM_CLASSES],
    /// Inclusive range for the number of bumps seeding each class.
    pub blob_range: (usize, usize),
    /// Peak amplitude of per-pixel white noise, in 8-bit counts.
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        // The prior mirrors the heavy tissue imbalance of real slides:
        // mostly normal, a large invasive region, traces of benign and
        // in-situ growth.
        SynthSpec {
            height: 1024,
            width: 1024,
            class_priors: [0.75, 0.01, 0.01, 0.23],
            blob_range: (2, 4),
            noise_level: 12.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation(format!(
                "slide dimensions must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if self.class_priors.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::validation(format!(
                "class priors must be non-negative, got {:?}",
                self.class_priors
            )));
        }
        let sum: f64 = self.class_priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "class priors must sum to 1, got {sum}"
            )));
        }
        if self.blob_range.0 == 0 || self.blob_range.0 > self.blob_range.1 {
            return Err(Error::validation(format!(
                "blob range must satisfy 1 <= min <= max, got {:?}",
                self.blob_range
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::validation(format!(
                "noise level must be non-negative, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Stain palette, one RGB triple per class. The shades mirror how the
/// classes read at low magnification: benign growth and in-situ lesions
/// sit only a few counts away from normal tissue (they are genuinely
/// subtle, often within the noise), while invasive tissue is markedly
/// darker and easy to spot.
const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [226.0, 205.0, 216.0], // normal: pale pink
    [218.0, 196.0, 212.0], // benign: barely rosier pink
    [210.0, 186.0, 206.0], // insitu: slightly deeper pink
    [138.0, 102.0, 162.0], // invasive: deep purple
];

/// Brightness modulation amplitude of the smooth texture field.
const TEXTURE_AMP: f64 = 14.0;

/// Generate one synthetic slide and its ground-truth mask.
///
/// Deterministic: the pair is a pure function of `(spec, seed)`.
pub fn synth_slide(spec: &SynthSpec, seed: u64) -> Result<(Image, LabelMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;

    // Independent substreams keep the mask layout stable if the image
    // texture code ever changes, and vice versa.
    let mut mask_rng = Rng::substream(seed, 0);
    let mut img_rng = Rng::substream(seed, 1);

    let mut labels = vec![0u8; n];
    let mut claimed = vec![false; n];
    for class in 1..NUM_CLASSES {
        let target = (spec.class_priors[class] * n as f64).round() as usize;
        // Draw the field even when the prior is zero so that one
        // class's prior does not shift every later class's layout.
        let field = bump_field(h, w, spec.blob_range, 1.0, &mut mask_rng);
        if target == 0 {
            continue;
        }
        let mut candidates: Vec<u32> = (0..n as u32).filter(|&i| !claimed[i as usize]).collect();
        if candidates.len() < target {
            return Err(Error::validation(format!(
                "class priors leave no room for class {class}"
            )));
        }
        let k = target - 1;
        candidates.select_nth_unstable_by(k, |&a, &b| {
            // Descending by field strength; index breaks exact ties so
            // the order is total.
            field[b as usize]
                .partial_cmp(&field[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &i in &candidates[..target] {
            claimed[i as usize] = true;
            labels[i as usize] = class as u8;
        }
    }
    let mask = LabelMask::new(h, w, labels)?;

    // Image: palette color of the label, shaded by one smooth texture
    // field shared across classes, plus white noise.
    let texture = bump_field(h, w, (3, 5), TEXTURE_AMP, &mut img_rng);
    let tex_mid = {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &t in &texture {
            lo = lo.min(t);
            hi = hi.max(t);
        }
        0.5 * (lo + hi)
    };
    let mut pixels = vec![0u8; n * 3];
    for i in 0..n {
        let base = PALETTE[mask.labels()[i] as usize];
        let shade = texture[i] - tex_mid;
        for ch in 0..3 {
            let noise = spec.noise_level * (2.0 * img_rng.next_f64() - 1.0);
            let v = base[ch] + shade + noise;
            pixels[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let image = Image::new_u8(h, w, 3, pixels)?;
    Ok((image, mask))
}

/// Sum of random Gaussian bumps over the pixel grid, peak-scaled to
/// roughly `amp`.
fn bump_field(h: usize, w: usize, blob_range: (usize, usize), amp: f64, rng: &mut Rng) -> Vec<f64> {
    let bumps = blob_range.0 + rng.below(blob_range.1 - blob_range.0 + 1);
    let min_dim = h.min(w) as f64;
    let mut centers = Vec::with_capacity(bumps);
    for _ in 0..bumps {
        let cy = rng.range_f64(0.0, h as f64);
        let cx = rng.range_f64(0.0, w as f64);
        let sigma = rng.range_f64(min_dim / 12.0, min_dim / 5.0);
        let height = rng.range_f64(0.6, 1.0);
        centers.push((cy, cx, 0.5 / (sigma * sigma), height));
    }
    let mut field = vec![0.0f64; h * w];
    for (cy, cx, inv2s2, height) in centers {
        for y in 0..h {
            let dy = y as f64 - cy;
            let row = &mut field[y * w..(y + 1) * w];
            for (x, f) in row.iter_mut().enumerate() {
                let dx = x as f64 - cx;
                *f += amp * height * (-(dy * dy + dx * dx) * inv2s2).exp();
            }
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            height: 96,
            width: 80,
            ..SynthSpec::default()
        };
        let (img_a, mask_a) = synth_slide(&spec, 5).unwrap();
        let (img_b, mask_b) = synth_slide(&spec, 5).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(mask_a, mask_b);
        let (_, mask_c) = synth_slide(&spec, 6).unwrap();
        assert_ne!(mask_a, mask_c);
    }

    #[test]
    fn frequencies_match_priors() {
        let spec = SynthSpec {
            height: 512,
            width: 512,
            ..SynthSpec::default()
        };
        let (_, mask) = synth_slide(&spec, 11).unwrap();
        let freq = mask.class_frequencies();
        for (f, p) in freq.iter().zip(spec.class_priors) {
            assert!(
                (f - p).abs() < 0.01,
                "frequency {f} strays from prior {p}"
            );
        }
    }

    #[test]
    fn all_normal_prior_gives_empty_mask() {
        let spec = SynthSpec {
            height: 64,
            width: 64,
            class_priors: [1.0, 0.0, 0.0, 0.0],
            ..SynthSpec::default()
        };
        let (_, mask) = synth_slide(&spec, 3).unwrap();
        assert!(mask.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn bad_priors_rejected() {
        let mut spec = SynthSpec::default();
        spec.class_priors = [0.5, 0.2, 0.2, 0.2];
        assert!(synth_slide(&spec, 1).is_err());
        spec.class_priors = [1.1, -0.1, 0.0, 0.0];
        assert!(synth_slide(&spec, 1).is_err());
    }

    #[test]
    fn zero_area_rejected() {
        let spec = SynthSpec {
            height: 0,
            width: 128,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_slide(&spec, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn image_is_rgb_u8() {
        let spec = SynthSpec {
            height: 32,
            width: 48,
            ..SynthSpec::default()
        };
        let (img, mask) = synth_slide(&spec, 9).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.is_u8());
        assert_eq!(img.height(), mask.height());
        assert_eq!(img.width(), mask.width());
    }
}
