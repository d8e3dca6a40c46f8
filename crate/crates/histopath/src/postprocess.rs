//! Probability-map postprocessing: Gaussian smoothing, thresholding,
//! morphological closing, connected components, and an adaptive area
//! filter that drops blobs small relative to the slide's own blob-size
//! distribution.
//!
//! The full chain ([`postprocess_chain`]) turns a raw single-channel
//! foreground probability map into a clean binary mask: blur, threshold,
//! close, then discard every component whose area falls below the power
//! mean `T = (mean(area^a))^(1/a)` of all component areas. Raising `a`
//! biases `T` toward the largest blobs and prunes more aggressively.

use crate::error::{Error, Result};
use crate::image::{LabelMask, ProbMap};

/// Tunables for [`postprocess_chain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessConfig {
    /// Gaussian kernel side length; odd. 1 disables smoothing.
    pub blur_kernel: usize,
    /// Gaussian sigma; defaults to `kernel / 6` when `None`.
    pub blur_sigma: Option<f64>,
    /// Foreground threshold in (0, 1); `>= t` is foreground.
    pub threshold: f32,
    /// Closing structuring-element side length; odd.
    pub closing_size: usize,
    /// Exponent `a` of the power-mean area threshold; positive.
    pub area_power: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            blur_kernel: 11,
            blur_sigma: None,
            threshold: 0.5,
            closing_size: 11,
            area_power: 2.0,
        }
    }
}

impl PostprocessConfig {
    pub fn effective_sigma(&self) -> f64 {
        self.blur_sigma.unwrap_or(self.blur_kernel as f64 / 6.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(Error::validation(format!(
                "blur kernel must be odd and positive, got {}",
                self.blur_kernel
            )));
        }
        if !(self.effective_sigma() > 0.0) {
            return Err(Error::validation(format!(
                "blur sigma must be positive, got {}",
                self.effective_sigma()
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation(format!(
                "threshold must lie strictly inside (0, 1), got {}",
                self.threshold
            )));
        }
        if self.closing_size == 0 || self.closing_size % 2 == 0 {
            return Err(Error::validation(format!(
                "closing element must be odd and positive, got {}",
                self.closing_size
            )));
        }
        if !(self.area_power > 0.0 && self.area_power.is_finite()) {
            return Err(Error::validation(format!(
                "area power must be positive and finite, got {}",
                self.area_power
            )));
        }
        Ok(())
    }
}

fn require_single_channel(map: &ProbMap) -> Result<()> {
    if map.classes() != 1 {
        return Err(Error::validation(format!(
            "postprocessing expects a single-channel map, got {} channels",
            map.classes()
        )));
    }
    Ok(())
}

fn require_binary(mask: &LabelMask) -> Result<()> {
    if let Some(&bad) = mask.labels().iter().find(|&&l| l > 1) {
        return Err(Error::validation(format!(
            "expected a binary mask, found label {bad}"
        )));
    }
    Ok(())
}

/// Separable Gaussian blur with edge renormalization: near the borders
/// the kernel is truncated to its in-bounds taps and reweighted so the
/// taps still sum to one. Output values stay inside [0, 1]; a constant
/// map passes through unchanged.
pub fn gaussian_blur(map: &ProbMap, kernel: usize, sigma: f64) -> Result<ProbMap> {
    require_single_channel(map)?;
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::validation(format!(
            "blur kernel must be odd and positive, got {kernel}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("blur sigma must be positive, got {sigma}")));
    }
    if kernel == 1 {
        return Ok(map.clone());
    }
    let radius = (kernel / 2) as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();

    let (h, w) = (map.height(), map.width());
    let src: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();

    // Horizontal pass, then vertical; both renormalize at the borders.
    let mut mid = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (wi, d) in (-radius..=radius).enumerate() {
                let xs = x as isize + d;
                if xs < 0 || xs >= w as isize {
                    continue;
                }
                acc += weights[wi] * src[y * w + xs as usize];
                wsum += weights[wi];
            }
            mid[y * w + x] = acc / wsum;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (wi, d) in (-radius..=radius).enumerate() {
                let ys = y as isize + d;
                if ys < 0 || ys >= h as isize {
                    continue;
                }
                acc += weights[wi] * mid[ys as usize * w + x];
                wsum += weights[wi];
            }
            out[y * w + x] = (acc / wsum).clamp(0.0, 1.0) as f32;
        }
    }
    ProbMap::new(1, h, w, out, false)
}

/// Binarize a single-channel map: probability `>= t` becomes 1.
pub fn threshold(map: &ProbMap, t: f32) -> Result<LabelMask> {
    require_single_channel(map)?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::validation(format!(
            "threshold must lie strictly inside (0, 1), got {t}"
        )));
    }
    let labels = map.values().iter().map(|&v| (v >= t) as u8).collect();
    LabelMask::new(map.height(), map.width(), labels)
}

/// Morphological closing (dilation then erosion) with a square
/// structuring element of odd side `size`.
///
/// The dilated mask is kept on a padded canvas so that erosion sees the
/// true dilation rather than an artificial border, which preserves the
/// two classical guarantees: the result contains the input and a second
/// closing changes nothing.
pub fn closing(mask: &LabelMask, size: usize) -> Result<LabelMask> {
    require_binary(mask)?;
    if size == 0 || size % 2 == 0 {
        return Err(Error::validation(format!(
            "closing element must be odd and positive, got {size}"
        )));
    }
    if size == 1 {
        return Ok(mask.clone());
    }
    let r = size / 2;
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h + 2 * r, w + 2 * r);

    // Dilation on the padded canvas, separable: horizontal max then
    // vertical max of the 0-padded input.
    let mut row_max = vec![0u8; ph * pw];
    for y in 0..h {
        for x in 0..pw {
            let x_lo = x.saturating_sub(r).max(r) - r;
            let x_hi = (x + r).min(w - 1 + r);
            let mut v = 0u8;
            if x_hi >= r {
                for xs in x_lo..=(x_hi - r) {
                    v |= mask.labels()[y * w + xs];
                }
            }
            row_max[(y + r) * pw + x] = v;
        }
    }
    let mut dilated = vec![0u8; ph * pw];
    for y in 0..ph {
        let y_lo = y.saturating_sub(r);
        let y_hi = (y + r).min(ph - 1);
        for x in 0..pw {
            let mut v = 0u8;
            for ys in y_lo..=y_hi {
                v |= row_max[ys * pw + x];
            }
            dilated[y * pw + x] = v;
        }
    }

    // Erosion evaluated only where we need it (the original domain);
    // every window lies inside the padded canvas by construction.
    let mut col_min = vec![1u8; ph * w];
    for y in 0..ph {
        for x in 0..w {
            let mut v = 1u8;
            for xs in x..x + 2 * r + 1 {
                v &= dilated[y * pw + xs];
            }
            col_min[y * w + x] = v;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 1u8;
            for ys in y..y + 2 * r + 1 {
                v &= col_min[ys * w + x];
            }
            out[y * w + x] = v;
        }
    }
    LabelMask::new(h, w, out)
}

/// One 4-connected foreground blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// 1-based id in discovery (scan) order.
    pub id: u32,
    pub area: usize,
    /// Flat pixel indices (`y * width + x`), ascending.
    pub pixels: Vec<u32>,
}

/// Label 4-connected components of a binary mask, via two-pass
/// union-find. Components are returned in order of their topmost,
/// leftmost pixel.
pub fn components(mask: &LabelMask) -> Result<Vec<Component>> {
    require_binary(mask)?;
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();

    struct Dsu(Vec<u32>);
    impl Dsu {
        fn find(&mut self, x: u32) -> u32 {
            let mut root = x;
            while self.0[root as usize] != root {
                root = self.0[root as usize];
            }
            let mut cur = x;
            while self.0[cur as usize] != root {
                cur = std::mem::replace(&mut self.0[cur as usize], root);
            }
            root
        }
        fn union(&mut self, a: u32, b: u32) {
            let (ra, rb) = (self.find(a), self.find(b));
            // Smaller root wins so final labels follow scan order.
            if ra < rb {
                self.0[rb as usize] = ra;
            } else {
                self.0[ra as usize] = rb;
            }
        }
    }

    let mut dsu = Dsu((0..(h * w) as u32).collect());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if labels[i] == 0 {
                continue;
            }
            if x > 0 && labels[i - 1] == 1 {
                dsu.union(i as u32, (i - 1) as u32);
            }
            if y > 0 && labels[i - w] == 1 {
                dsu.union(i as u32, (i - w) as u32);
            }
        }
    }

    let mut by_root: std::collections::BTreeMap<u32, Vec<u32>> = std::collections::BTreeMap::new();
    for i in 0..h * w {
        if labels[i] == 1 {
            by_root.entry(dsu.find(i as u32)).or_default().push(i as u32);
        }
    }
    Ok(by_root
        .into_values()
        .enumerate()
        .map(|(k, pixels)| Component {
            id: k as u32 + 1,
            area: pixels.len(),
            pixels,
        })
        .collect())
}

/// Result of [`area_filter`]: indices of surviving components and the
/// threshold they were held against (`None` when there was nothing to
/// filter).
#[derive(Debug, Clone, PartialEq)]
pub struct AreaFilter {
    pub kept: Vec<usize>,
    pub threshold: Option<f64>,
}

/// Keep components whose area reaches the power mean
/// `T = (mean(area^a))^(1/a)`; strictly smaller ones are discarded.
/// The mean runs over all components in a single pass, discarded ones
/// included. A relative epsilon absorbs `powf` round-off so that equal
/// areas always survive their own mean.
pub fn area_filter(comps: &[Component], power: f64) -> Result<AreaFilter> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::validation(format!(
            "area power must be positive and finite, got {power}"
        )));
    }
    if comps.is_empty() {
        return Ok(AreaFilter {
            kept: Vec::new(),
            threshold: None,
        });
    }
    let mean_pow: f64 = comps
        .iter()
        .map(|c| (c.area as f64).powf(power))
        .sum::<f64>()
        / comps.len() as f64;
    let t = mean_pow.powf(1.0 / power);
    let slack = 1e-9 * t.max(1.0);
    let kept = comps
        .iter()
        .enumerate()
        .filter(|(_, c)| c.area as f64 >= t - slack)
        .map(|(i, _)| i)
        .collect();
    Ok(AreaFilter {
        kept,
        threshold: Some(t),
    })
}

/// Full chain: blur, threshold, close, drop sub-threshold components.
/// Returns the cleaned binary mask.
pub fn postprocess_chain(map: &ProbMap, cfg: &PostprocessConfig) -> Result<LabelMask> {
    cfg.validate()?;
    let blurred = gaussian_blur(map, cfg.blur_kernel, cfg.effective_sigma())?;
    let raw = threshold(&blurred, cfg.threshold)?;
    let closed = closing(&raw, cfg.closing_size)?;
    let comps = components(&closed)?;
    let filter = area_filter(&comps, cfg.area_power)?;
    let mut labels = vec![0u8; closed.height() * closed.width()];
    for &i in &filter.kept {
        for &p in &comps[i].pixels {
            labels[p as usize] = 1;
        }
    }
    LabelMask::new(closed.height(), closed.width(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn map(h: usize, w: usize, v: &[f32]) -> ProbMap {
        ProbMap::new(1, h, w, v.to_vec(), false).unwrap()
    }

    fn binmask(h: usize, w: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn blur_keeps_constant_maps() {
        let m = map(6, 6, &[0.42; 36]);
        let out = gaussian_blur(&m, 5, 1.0).unwrap();
        for &v in out.values() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_kernel_one_is_identity() {
        let vals: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let m = map(3, 4, &vals);
        assert_eq!(gaussian_blur(&m, 1, 0.5).unwrap(), m);
    }

    #[test]
    fn blur_impulse_reproduces_separable_kernel() {
        let mut vals = vec![0.0f32; 81];
        vals[4 * 9 + 4] = 1.0;
        let m = map(9, 9, &vals);
        let sigma = 0.8;
        let out = gaussian_blur(&m, 3, sigma).unwrap();
        // Expected: outer product of the normalized 1-D kernel.
        let raw: Vec<f64> = (-1i32..=1)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        let k: Vec<f64> = raw.iter().map(|v| v / s).collect();
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let got = out.get(0, (4 + dy) as usize, (4 + dx) as usize) as f64;
                let want = k[(dy + 1) as usize] * k[(dx + 1) as usize];
                assert!((got - want).abs() < 1e-6, "offset ({dy},{dx}): {got} vs {want}");
            }
        }
        // Mass far from the impulse stays zero.
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn blur_rejects_bad_kernels() {
        let m = map(2, 2, &[0.0; 4]);
        assert!(gaussian_blur(&m, 4, 1.0).is_err());
        assert!(gaussian_blur(&m, 3, 0.0).is_err());
    }

    #[test]
    fn threshold_is_inclusive_at_t() {
        let m = map(1, 4, &[0.49, 0.5, 0.51, 0.0]);
        let out = threshold(&m, 0.5).unwrap();
        assert_eq!(out.labels(), &[0, 1, 1, 0]);
        assert!(threshold(&m, 0.0).is_err());
        assert!(threshold(&m, 1.0).is_err());
    }

    #[test]
    fn closing_fills_small_holes() {
        #[rustfmt::skip]
        let m = binmask(5, 5, &[
            1, 1, 1, 1, 1,
            1, 1, 1, 1, 1,
            1, 1, 0, 1, 1,
            1, 1, 1, 1, 1,
            1, 1, 1, 1, 1,
        ]);
        let out = closing(&m, 3).unwrap();
        assert!(out.labels().iter().all(|&v| v == 1));
    }

    #[test]
    fn closing_is_extensive_and_idempotent() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let labels: Vec<u8> = (0..32 * 32).map(|_| (rng.below(5) == 0) as u8).collect();
            let m = binmask(32, 32, &labels);
            let once = closing(&m, 5).unwrap();
            for (a, b) in m.labels().iter().zip(once.labels()) {
                assert!(b >= a, "closing removed a foreground pixel");
            }
            let twice = closing(&once, 5).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn closing_rejects_even_elements_and_multiclass() {
        let m = binmask(2, 2, &[0, 1, 0, 1]);
        assert!(closing(&m, 4).is_err());
        let multi = LabelMask::new(1, 2, vec![0, 2]).unwrap();
        assert!(closing(&multi, 3).is_err());
    }

    #[test]
    fn components_respect_4_connectivity() {
        // Diagonal pixels do not touch under 4-connectivity.
        let m = binmask(2, 2, &[1, 0, 0, 1]);
        let comps = components(&m).unwrap();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].pixels, vec![0]);
        assert_eq!(comps[1].pixels, vec![3]);
    }

    #[test]
    fn components_merge_l_shapes() {
        #[rustfmt::skip]
        let m = binmask(3, 3, &[
            1, 0, 1,
            1, 0, 1,
            1, 1, 1,
        ]);
        let comps = components(&m).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area, 7);
    }

    #[test]
    fn components_of_empty_mask() {
        let m = binmask(3, 3, &[0; 9]);
        assert!(components(&m).unwrap().is_empty());
    }

    #[test]
    fn area_filter_hand_cases() {
        let comp = |area: usize| Component {
            id: 1,
            area,
            pixels: vec![0; area],
        };
        // Areas 1 and 100: arithmetic mean 50.5 discards the runt, and the
        // quadratic mean sqrt(5000.5) ~ 70.7 also does.
        let comps = vec![comp(1), comp(100)];
        let f1 = area_filter(&comps, 1.0).unwrap();
        assert_eq!(f1.kept, vec![1]);
        assert!((f1.threshold.unwrap() - 50.5).abs() < 1e-9);
        let f2 = area_filter(&comps, 2.0).unwrap();
        assert_eq!(f2.kept, vec![1]);
        assert!((f2.threshold.unwrap() - 5000.5f64.sqrt()).abs() < 1e-9);
        // Equal areas survive their own mean for any exponent.
        let equal = vec![comp(9), comp(9)];
        for a in [0.5, 1.0, 2.0, 4.0, 7.3] {
            let f = area_filter(&equal, a).unwrap();
            assert_eq!(f.kept, vec![0, 1], "power {a}");
        }
    }

    #[test]
    fn area_filter_threshold_grows_with_power() {
        let comp = |area: usize| Component {
            id: 1,
            area,
            pixels: vec![0; area],
        };
        let comps = vec![comp(2), comp(10), comp(40)];
        let mut last = 0.0;
        for a in [0.5, 1.0, 2.0, 3.0, 5.0] {
            let t = area_filter(&comps, a).unwrap().threshold.unwrap();
            assert!(t >= last - 1e-9, "power mean not monotone: {t} after {last}");
            last = t;
        }
    }

    #[test]
    fn area_filter_empty_input() {
        let f = area_filter(&[], 2.0).unwrap();
        assert!(f.kept.is_empty());
        assert!(f.threshold.is_none());
    }

    #[test]
    fn chain_cleans_speckle_keeps_blob() {
        // A solid 12x12 blob plus scattered single-pixel speckle: the chain
        // keeps the blob, drops the specks.
        let (h, w) = (32, 32);
        let mut vals = vec![0.0f32; h * w];
        for y in 8..20 {
            for x in 8..20 {
                vals[y * w + x] = 0.95;
            }
        }
        for &(y, x) in &[(2usize, 2usize), (2, 29), (29, 2), (29, 29)] {
            vals[y * w + x] = 1.0;
        }
        let m = map(h, w, &vals);
        let cfg = PostprocessConfig {
            blur_kernel: 3,
            closing_size: 3,
            ..PostprocessConfig::default()
        };
        let out = postprocess_chain(&m, &cfg).unwrap();
        assert_eq!(out.get(13, 13), 1, "blob center survived");
        assert_eq!(out.get(2, 2), 0, "speck removed");
        assert_eq!(out.get(29, 29), 0, "speck removed");
    }
}
