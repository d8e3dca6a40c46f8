//! Evaluation metrics: patch-level accuracy, per-class and abnormal
//! Dice overlap, and the slide-level severity score used for the final
//! tables.
//!
//! The severity score for masks labelled 0..=3 is
//!
//! ```text
//! score = 1 - sum_i |pred_i - gt_i|
//!             / sum_i max(gt_i, 3 - gt_i) * [gt_i > 0 and pred_i > 0]
//! ```
//!
//! with the numerator over all pixels and the indicator gating only the
//! denominator. The score rewards getting severity right and is bounded
//! above by 1 but not below by 0. A prediction/truth pair whose
//! denominator vanishes (no pixel is abnormal in both) has no defined
//! score and produces an error rather than a silent substitute.
//!
//! [`reference`] holds deliberately naive re-implementations used to
//! cross-check the fast paths; they share no code with them.

use crate::error::{Error, Result};
use crate::image::{LabelMask, NUM_CLASSES};

/// Per-mask segmentation scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScore {
    pub bach: f64,
    pub dice: [f64; NUM_CLASSES],
    pub dice_abnormal: f64,
}

/// Fraction of positions where the two label sequences agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} labels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::validation("accuracy of zero labels is undefined"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_same_shape(pred: &LabelMask, truth: &LabelMask) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    Ok(())
}

/// Dice overlap `2|P inter T| / (|P| + |T|)` for one class. Both sets
/// empty counts as perfect agreement (1).
pub fn dice_class(pred: &LabelMask, truth: &LabelMask, class: u8) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let in_p = p == class;
        let in_t = t == class;
        p_count += in_p as usize;
        t_count += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    if p_count + t_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + t_count) as f64)
}

/// Dice overlap of the abnormal region (any label above 0).
pub fn dice_abnormal(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let in_p = p > 0;
        let in_t = t > 0;
        p_count += in_p as usize;
        t_count += in_t as usize;
        inter += (in_p && in_t) as usize;
    }
    if p_count + t_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + t_count) as f64)
}

/// Slide-level severity score (see the module docs for the formula and
/// its quirks). Errors when the denominator is zero.
pub fn bach_score(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let max_label = (NUM_CLASSES - 1) as i64;
    let mut num = 0i64;
    let mut den = 0i64;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (p, t) = (p as i64, t as i64);
        num += (p - t).abs();
        if t > 0 && p > 0 {
            den += t.max(max_label - t);
        }
    }
    if den == 0 {
        return Err(Error::UndefinedMetric(
            "severity score denominator is zero: no pixel is abnormal in both masks".into(),
        ));
    }
    Ok(1.0 - num as f64 / den as f64)
}

/// All mask-level scores in one pass-friendly bundle.
pub fn seg_score(pred: &LabelMask, truth: &LabelMask) -> Result<SegScore> {
    let mut dice = [0.0; NUM_CLASSES];
    for (class, d) in dice.iter_mut().enumerate() {
        *d = dice_class(pred, truth, class as u8)?;
    }
    Ok(SegScore {
        bach: bach_score(pred, truth)?,
        dice,
        dice_abnormal: dice_abnormal(pred, truth)?,
    })
}

/// Naive reference implementations, written as literally as possible:
/// explicit pixel-index sets, membership tested by scanning. Slow on
/// purpose; they exist to catch mistakes in the fast versions.
pub mod reference {
    use super::*;

    pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::validation("bad label sequences"));
        }
        let mut hits = 0usize;
        for i in 0..pred.len() {
            if pred[i] == truth[i] {
                hits += 1;
            }
        }
        Ok(hits as f64 / pred.len() as f64)
    }

    fn index_set(mask: &LabelMask, keep: impl Fn(u8) -> bool) -> Vec<usize> {
        let mut set = Vec::new();
        for (i, &l) in mask.labels().iter().enumerate() {
            if keep(l) {
                set.push(i);
            }
        }
        set
    }

    fn dice_of_sets(p: &[usize], t: &[usize]) -> f64 {
        if p.is_empty() && t.is_empty() {
            return 1.0;
        }
        let mut inter = 0usize;
        for a in p {
            for b in t {
                if a == b {
                    inter += 1;
                }
            }
        }
        2.0 * inter as f64 / (p.len() + t.len()) as f64
    }

    pub fn dice_class(pred: &LabelMask, truth: &LabelMask, class: u8) -> f64 {
        let p = index_set(pred, |l| l == class);
        let t = index_set(truth, |l| l == class);
        dice_of_sets(&p, &t)
    }

    pub fn dice_abnormal(pred: &LabelMask, truth: &LabelMask) -> f64 {
        let p = index_set(pred, |l| l > 0);
        let t = index_set(truth, |l| l > 0);
        dice_of_sets(&p, &t)
    }

    pub fn bach_score(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..truth.labels().len() {
            let p = pred.labels()[i] as f64;
            let t = truth.labels()[i] as f64;
            num += (p - t).abs();
            let indicator = if t > 0.0 && p > 0.0 { 1.0 } else { 0.0 };
            den += if t >= 3.0 - t { t } else { 3.0 - t } * indicator;
        }
        if den == 0.0 {
            return Err(Error::UndefinedMetric("zero denominator".into()));
        }
        Ok(1.0 - num / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask(h: usize, w: usize, labels: &[u8]) -> LabelMask {
        LabelMask::new(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 0, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn dice_identical_masks_is_one() {
        let m = mask(2, 2, &[0, 1, 2, 3]);
        for c in 0..4 {
            assert_eq!(dice_class(&m, &m, c).unwrap(), 1.0);
        }
        assert_eq!(dice_abnormal(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_masks_is_zero() {
        let a = mask(1, 4, &[1, 1, 0, 0]);
        let b = mask(1, 4, &[0, 0, 1, 1]);
        assert_eq!(dice_class(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dice_abnormal(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_empty_empty_is_one() {
        let a = mask(1, 3, &[0, 0, 0]);
        assert_eq!(dice_class(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(dice_abnormal(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_partial_overlap() {
        // |P| = 2, |T| = 3, |P inter T| = 1 -> 2/5.
        let p = mask(1, 5, &[1, 1, 0, 0, 0]);
        let t = mask(1, 5, &[1, 0, 1, 1, 0]);
        assert_eq!(dice_class(&p, &t, 1).unwrap(), 0.4);
    }

    #[test]
    fn bach_hand_case() {
        // gt = [0, 3, 1], pred = [0, 1, 1]:
        // numerator |0-0| + |1-3| + |1-1| = 2,
        // denominator 0 + max(3,0) + max(1,2) = 5  ->  1 - 2/5 = 0.6.
        let gt = mask(1, 3, &[0, 3, 1]);
        let pred = mask(1, 3, &[0, 1, 1]);
        assert_eq!(bach_score(&pred, &gt).unwrap(), 0.6);
    }

    #[test]
    fn bach_perfect_prediction_is_one() {
        let gt = mask(1, 4, &[0, 3, 2, 1]);
        assert_eq!(bach_score(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn bach_zero_denominator_is_an_error() {
        // Truth abnormal, prediction all normal: indicator never fires.
        let gt = mask(1, 3, &[3, 3, 0]);
        let pred = mask(1, 3, &[0, 0, 0]);
        assert!(matches!(
            bach_score(&pred, &gt),
            Err(Error::UndefinedMetric(_))
        ));
        // Both all normal: same.
        let zero = mask(1, 3, &[0, 0, 0]);
        assert!(bach_score(&zero, &zero).is_err());
    }

    #[test]
    fn bach_can_go_negative() {
        // Wildly wrong predictions push the score below zero; only the
        // upper bound of 1 is guaranteed.
        let gt = mask(1, 4, &[0, 0, 0, 3]);
        let pred = mask(1, 4, &[3, 3, 3, 3]);
        let s = bach_score(&pred, &gt).unwrap();
        assert!(s < 0.0, "score {s}");
        assert!(s <= 1.0);
    }

    #[test]
    fn fast_paths_match_references_on_random_masks() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let labels_a: Vec<u8> = (0..16 * 16).map(|_| rng.below(4) as u8).collect();
            let labels_b: Vec<u8> = (0..16 * 16).map(|_| rng.below(4) as u8).collect();
            let a = mask(16, 16, &labels_a);
            let b = mask(16, 16, &labels_b);
            for c in 0..4 {
                let fast = dice_class(&a, &b, c).unwrap();
                let slow = reference::dice_class(&a, &b, c);
                assert!((fast - slow).abs() < 1e-12);
            }
            assert!((dice_abnormal(&a, &b).unwrap() - reference::dice_abnormal(&a, &b)).abs() < 1e-12);
            match (bach_score(&a, &b), reference::bach_score(&a, &b)) {
                (Ok(f), Ok(s)) => assert!((f - s).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                (f, s) => panic!("divergence: fast {f:?}, reference {s:?}"),
            }
        }
    }

    #[test]
    fn seg_score_bundles_everything() {
        let gt = mask(1, 4, &[0, 3, 2, 1]);
        let s = seg_score(&gt, &gt).unwrap();
        assert_eq!(s.bach, 1.0);
        assert_eq!(s.dice, [1.0; 4]);
        assert_eq!(s.dice_abnormal, 1.0);
    }
}
