//! Summary features over a stack of patch predictions.
//!
//! One slide yields many patch-level class-probability rows; a downstream
//! tabular model wants a single fixed-length row per slide. The summary
//! keeps, per class: min, max, mean, the number of patches where the class
//! wins the argmax, the 10/25/75/90 percentiles, and how many patches
//! exceed the 0.15 and 0.25 probability thresholds.
//!
//! Ordering is frozen (and mirrored in CSV headers): for each class c the
//! triple `c{c}_min, c{c}_max, c{c}_mean`; then `c{c}_wins` for each class;
//! then `c{c}_p10, c{c}_p25, c{c}_p75, c{c}_p90` per class; then
//! `c{c}_above15, c{c}_above25` per class — 10 features per class in total.
//! A single-column (one-vs-all) matrix gets the same statistics minus the
//! argmax counts, 9 features named with a bare `p_` prefix.
//!
//! Conventions, declared once here: percentiles use linear interpolation on
//! the sorted values (rank = q/100 * (n-1)); threshold counts use strict
//! `>`, so a patch at exactly 0.25 does not count as above 0.25; argmax
//! ties go to the lowest class index.

use crate::error::{Error, Result};
use crate::image::PredMatrix;

/// A named, ordered row of summary statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::shape(format!(
                "{} feature names for {} values",
                names.len(),
                values.len()
            )));
        }
        Ok(FeatureVector { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    /// Concatenate feature rows, prefixing each name with its source tag so
    /// the combined row stays unambiguous (`tag.name`).
    pub fn concat_tagged(parts: &[(&str, &FeatureVector)]) -> Result<Self> {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (tag, fv) in parts {
            for (n, v) in fv.names.iter().zip(&fv.values) {
                names.push(format!("{tag}.{n}"));
                values.push(*v);
            }
        }
        FeatureVector::new(names, values)
    }
}

/// Percentile by linear interpolation on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

const THRESHOLDS: [f64; 2] = [0.15, 0.25];

/// Reduce a patch-prediction matrix to one summary row. A K-class matrix
/// yields 10K features; a single-column matrix yields the 9-feature
/// one-vs-all variant (argmax counts are meaningless for one column).
pub fn extract_features(pred: &PredMatrix) -> Result<FeatureVector> {
    let p = pred.rows();
    let k = pred.classes();
    if k == 1 {
        return one_vs_all(pred);
    }

    let mut names = Vec::with_capacity(10 * k);
    let mut values = Vec::with_capacity(10 * k);

    // Per-class sorted copies; everything below reads from these.
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut col: Vec<f64> = (0..p).map(|r| pred.get(r, c) as f64).collect();
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
            col
        })
        .collect();

    for (c, col) in columns.iter().enumerate() {
        let mean = col.iter().sum::<f64>() / p as f64;
        names.push(format!("c{c}_min"));
        values.push(col[0]);
        names.push(format!("c{c}_max"));
        values.push(col[p - 1]);
        names.push(format!("c{c}_mean"));
        values.push(mean);
    }

    let mut wins = vec![0usize; k];
    for label in pred.argmax_labels() {
        wins[label] += 1;
    }
    for (c, w) in wins.iter().enumerate() {
        names.push(format!("c{c}_wins"));
        values.push(*w as f64);
    }

    for (c, col) in columns.iter().enumerate() {
        for q in [10.0, 25.0, 75.0, 90.0] {
            names.push(format!("c{c}_p{q:.0}"));
            values.push(percentile(col, q));
        }
    }

    for (c, col) in columns.iter().enumerate() {
        for t in THRESHOLDS {
            names.push(format!("c{c}_above{:.0}", t * 100.0));
            values.push(col.iter().filter(|v| **v > t).count() as f64);
        }
    }

    FeatureVector::new(names, values)
}

fn one_vs_all(pred: &PredMatrix) -> Result<FeatureVector> {
    let p = pred.rows();
    let mut col: Vec<f64> = (0..p).map(|r| pred.get(r, 0) as f64).collect();
    col.sort_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
    let mean = col.iter().sum::<f64>() / p as f64;

    let mut names = vec![
        "p_min".to_string(),
        "p_max".to_string(),
        "p_mean".to_string(),
    ];
    let mut values = vec![col[0], col[p - 1], mean];
    for q in [10.0, 25.0, 75.0, 90.0] {
        names.push(format!("p_p{q:.0}"));
        values.push(percentile(&col, q));
    }
    for t in THRESHOLDS {
        names.push(format!("p_above{:.0}", t * 100.0));
        values.push(col.iter().filter(|v| **v > t).count() as f64);
    }
    FeatureVector::new(names, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, classes: usize, seed: u64) -> PredMatrix {
        let mut rng = Rng::new(seed);
        let mut values = Vec::with_capacity(rows * classes);
        for _ in 0..rows {
            // Normalized rows keep the matrix plausible, though the
            // extractor does not require it.
            let raw: Vec<f64> = (0..classes).map(|_| rng.range_f64(0.01, 1.0)).collect();
            let sum: f64 = raw.iter().sum();
            values.extend(raw.iter().map(|v| (v / sum) as f32));
        }
        PredMatrix::new(rows, classes, values).unwrap()
    }

    #[test]
    fn four_class_matrix_yields_forty_named_features() {
        let pred = random_matrix(176, 4, 11);
        let fv = extract_features(&pred).unwrap();
        assert_eq!(fv.len(), 40);
        assert_eq!(fv.names()[0], "c0_min");
        assert_eq!(fv.names()[11], "c3_mean");
        assert_eq!(fv.names()[12], "c0_wins");
        assert_eq!(fv.names()[16], "c0_p10");
        assert_eq!(fv.names()[31], "c3_p90");
        assert_eq!(fv.names()[32], "c0_above15");
        assert_eq!(fv.names()[39], "c3_above25");
        // Names are unique.
        let mut sorted = fv.names().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 40);
    }

    #[test]
    fn constant_quarter_matrix_statistics() {
        let pred = PredMatrix::new(8, 4, vec![0.25; 32]).unwrap();
        let fv = extract_features(&pred).unwrap();
        for c in 0..4 {
            for stat in ["min", "max", "mean", "p10", "p25", "p75", "p90"] {
                let v = fv.get(&format!("c{c}_{stat}")).unwrap();
                assert!((v - 0.25).abs() < 1e-9, "c{c}_{stat} = {v}");
            }
            // 0.25 > 0.15 counts every patch; strict > leaves 0.25 out.
            assert_eq!(fv.get(&format!("c{c}_above15")).unwrap(), 8.0);
            assert_eq!(fv.get(&format!("c{c}_above25")).unwrap(), 0.0);
        }
        // Argmax ties resolve to class 0.
        assert_eq!(fv.get("c0_wins").unwrap(), 8.0);
        assert_eq!(fv.get("c1_wins").unwrap(), 0.0);
    }

    #[test]
    fn percentiles_interpolate_linearly() {
        // Column values 0.1, 0.2, 0.3, 0.4, 0.5: p25 sits at rank 1.0,
        // p90 at rank 3.6 -> 0.4 + 0.6 * 0.1.
        let mut values = Vec::new();
        for v in [0.3f32, 0.1, 0.5, 0.2, 0.4] {
            values.extend([v, 1.0 - v]);
        }
        let pred = PredMatrix::new(5, 2, values).unwrap();
        let fv = extract_features(&pred).unwrap();
        // Tolerances allow for the f32 storage of the prediction matrix.
        assert!((fv.get("c0_p25").unwrap() - 0.2).abs() < 1e-7);
        assert!((fv.get("c0_p10").unwrap() - 0.14).abs() < 1e-7);
        assert!((fv.get("c0_p75").unwrap() - 0.4).abs() < 1e-7);
        assert!((fv.get("c0_p90").unwrap() - 0.46).abs() < 1e-7);
    }

    #[test]
    fn one_column_matrix_yields_nine_features() {
        let pred = PredMatrix::new(6, 1, vec![0.1, 0.9, 0.3, 0.2, 0.8, 0.6]).unwrap();
        let fv = extract_features(&pred).unwrap();
        assert_eq!(fv.len(), 9);
        assert!((fv.get("p_min").unwrap() - 0.1).abs() < 1e-7);
        assert!((fv.get("p_max").unwrap() - 0.9).abs() < 1e-7);
        assert_eq!(fv.get("p_above25").unwrap(), 4.0);
        assert_eq!(fv.get("p_above15").unwrap(), 5.0);
        assert!(fv.get("p_wins").is_none());
    }

    #[test]
    fn concat_tagged_prefixes_names() {
        let a = extract_features(&random_matrix(4, 2, 1)).unwrap();
        let b = extract_features(&random_matrix(4, 2, 2)).unwrap();
        let both = FeatureVector::concat_tagged(&[("net1", &a), ("net2", &b)]).unwrap();
        assert_eq!(both.len(), a.len() + b.len());
        assert_eq!(both.names()[0], "net1.c0_min");
        assert_eq!(both.get("net2.c1_mean"), b.get("c1_mean"));
    }

    proptest! {
        #[test]
        fn argmax_wins_partition_the_patches(seed in 0u64..200, rows in 1usize..40) {
            let pred = random_matrix(rows, 4, seed);
            let fv = extract_features(&pred).unwrap();
            let total: f64 = (0..4).map(|c| fv.get(&format!("c{c}_wins")).unwrap()).sum();
            prop_assert_eq!(total, rows as f64);
        }

        #[test]
        fn percentile_chain_is_monotone(seed in 0u64..200, rows in 1usize..40) {
            let pred = random_matrix(rows, 3, seed);
            let fv = extract_features(&pred).unwrap();
            for c in 0..3 {
                let g = |s: &str| fv.get(&format!("c{c}_{s}")).unwrap();
                let chain = [g("min"), g("p10"), g("p25"), g("p75"), g("p90"), g("max")];
                for w in chain.windows(2) {
                    prop_assert!(w[0] <= w[1] + 1e-12, "chain {chain:?}");
                }
                prop_assert!(g("mean") >= g("min") - 1e-12 && g("mean") <= g("max") + 1e-12);
                prop_assert!(g("above15") >= g("above25"));
                prop_assert!(g("above15") <= rows as f64);
            }
        }
    }
}
