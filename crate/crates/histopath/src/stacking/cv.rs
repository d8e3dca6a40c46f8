//! Repeated stratified cross-validation and greedy backward model
//! selection.
//!
//! A single k-fold accuracy is noisy on small tables, so scores average
//! over many reshuffles (default 10 folds x 20 shuffles = 200 fold
//! evaluations). Selection then works backwards from the full model set:
//! at each step it re-scores every candidate removal and drops the model
//! whose absence helps the most, stopping as soon as no removal strictly
//! improves the score. Every candidate subset is scored with the same plan
//! seed, so comparisons are paired and the whole procedure is
//! deterministic.

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::rng::Rng;
use crate::stacking::features::FeatureVector;
use crate::stacking::gbt::{gbt_train, GbtParams};

#[derive(Clone, Copy, Debug)]
pub struct CvPlan {
    pub folds: usize,
    pub shuffles: usize,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            folds: 10,
            shuffles: 20,
            seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::validation(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.shuffles == 0 {
            return Err(Error::validation("at least one shuffle is required"));
        }
        Ok(())
    }
}

/// Split indices into `folds` disjoint groups with per-class balance: each
/// class is shuffled separately and dealt round-robin, so every fold holds
/// that class's count divided by `folds`, within one sample.
pub fn stratified_kfold(
    labels: &[usize],
    folds: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::validation(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::validation("cannot fold an empty label set"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(i);
    }
    for (c, group) in groups.iter().enumerate() {
        if !group.is_empty() && group.len() < folds {
            return Err(Error::validation(format!(
                "class {c} has {} samples, cannot stratify into {folds} folds",
                group.len()
            )));
        }
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for group in groups.iter_mut() {
        rng.shuffle(group);
        for (i, &idx) in group.iter().enumerate() {
            out[i % folds].push(idx);
        }
    }
    Ok(out)
}

/// Accuracy of every held-out fold across every shuffle, in evaluation
/// order (`shuffles * folds` entries).
pub fn cv_fold_scores(
    table: &[FeatureVector],
    labels: &[usize],
    plan: &CvPlan,
    params: &GbtParams,
) -> Result<Vec<f64>> {
    plan.validate()?;
    if table.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} rows but {} labels",
            table.len(),
            labels.len()
        )));
    }
    let mut scores = Vec::with_capacity(plan.shuffles * plan.folds);
    for s in 0..plan.shuffles {
        let mut rng = Rng::substream(plan.seed, s as u64);
        let folds = stratified_kfold(labels, plan.folds, &mut rng)?;
        for held_out in &folds {
            let in_train = |i: &usize| !held_out.contains(i);
            let train_rows: Vec<FeatureVector> = (0..table.len())
                .filter(in_train)
                .map(|i| table[i].clone())
                .collect();
            let train_labels: Vec<usize> =
                (0..labels.len()).filter(in_train).map(|i| labels[i]).collect();
            let model = gbt_train(&train_rows, &train_labels, params)?;
            let test_rows: Vec<FeatureVector> =
                held_out.iter().map(|&i| table[i].clone()).collect();
            let test_labels: Vec<usize> = held_out.iter().map(|&i| labels[i]).collect();
            let predicted = model.predict_labels(&test_rows)?;
            scores.push(accuracy(&predicted, &test_labels)?);
        }
    }
    Ok(scores)
}

/// Mean and sample standard deviation of the per-fold accuracies.
pub fn cv_score(
    table: &[FeatureVector],
    labels: &[usize],
    plan: &CvPlan,
    params: &GbtParams,
) -> Result<(f64, f64)> {
    let scores = cv_fold_scores(table, labels, plan, params)?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sd = if scores.len() > 1 {
        (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, sd))
}

/// Combine per-model feature rows for the chosen subset into one stacked
/// table, tagging each column with its model name.
pub fn stack_features(
    model_names: &[String],
    per_model: &[Vec<FeatureVector>],
    subset: &[usize],
) -> Result<Vec<FeatureVector>> {
    if subset.is_empty() {
        return Err(Error::validation("cannot stack an empty model subset"));
    }
    let rows = per_model[subset[0]].len();
    (0..rows)
        .map(|i| {
            let parts: Vec<(&str, &FeatureVector)> = subset
                .iter()
                .map(|&m| (model_names[m].as_str(), &per_model[m][i]))
                .collect();
            FeatureVector::concat_tagged(&parts)
        })
        .collect()
}

/// Outcome of backward elimination: which models survive and the score
/// after each accepted step (index 0 = full set).
#[derive(Clone, Debug)]
pub struct Selection {
    pub kept: Vec<usize>,
    pub kept_names: Vec<String>,
    pub trace: Vec<f64>,
}

/// Backward elimination over stacked model features. Starts from all
/// models; each step drops the removal that best improves the mean CV
/// accuracy, stopping when nothing strictly improves it. Ties between
/// equally good removals go to the lowest model index.
pub fn greedy_select(
    model_names: &[String],
    per_model: &[Vec<FeatureVector>],
    labels: &[usize],
    plan: &CvPlan,
    params: &GbtParams,
) -> Result<Selection> {
    if model_names.is_empty() || model_names.len() != per_model.len() {
        return Err(Error::validation(format!(
            "{} model names for {} feature sets",
            model_names.len(),
            per_model.len()
        )));
    }
    for (m, rows) in per_model.iter().enumerate() {
        if rows.len() != labels.len() {
            return Err(Error::shape(format!(
                "model '{}' has {} rows but there are {} labels",
                model_names[m],
                rows.len(),
                labels.len()
            )));
        }
    }
    let score = |subset: &[usize]| -> Result<f64> {
        let table = stack_features(model_names, per_model, subset)?;
        cv_score(&table, labels, plan, params).map(|(mean, _)| mean)
    };

    let mut kept: Vec<usize> = (0..model_names.len()).collect();
    let mut trace = vec![score(&kept)?];
    while kept.len() >= 2 {
        let current = *trace.last().unwrap();
        let mut best: Option<(usize, f64)> = None;
        for pos in 0..kept.len() {
            let mut candidate = kept.clone();
            candidate.remove(pos);
            let s = score(&candidate)?;
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((pos, s));
            }
        }
        let (pos, s) = best.expect("at least one candidate");
        if s > current {
            kept.remove(pos);
            trace.push(s);
        } else {
            break;
        }
    }
    let kept_names = kept.iter().map(|&m| model_names[m].clone()).collect();
    Ok(Selection {
        kept,
        kept_names,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv1(name: &str, v: f64) -> FeatureVector {
        FeatureVector::new(vec![name.to_string()], vec![v]).unwrap()
    }

    fn quick_params() -> GbtParams {
        GbtParams {
            rounds: 3,
            depth: 2,
            ..GbtParams::default()
        }
    }

    #[test]
    fn folds_partition_indices_with_balanced_classes() {
        let labels: Vec<usize> = (0..27).map(|i| i % 3).collect();
        let mut rng = Rng::new(4);
        let folds = stratified_kfold(&labels, 3, &mut rng).unwrap();
        let mut seen: Vec<usize> = folds.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..27).collect::<Vec<_>>());
        for fold in &folds {
            assert_eq!(fold.len(), 9);
            for c in 0..3 {
                let n = fold.iter().filter(|&&i| labels[i] == c).count();
                assert_eq!(n, 3, "class {c} imbalanced: {n}");
            }
        }
    }

    #[test]
    fn uneven_classes_stay_within_one_sample_of_ideal() {
        // 11 of class 0, 7 of class 1, 5 of class 2 over 4 folds.
        let mut labels = vec![0usize; 11];
        labels.extend(vec![1usize; 7]);
        labels.extend(vec![2usize; 5]);
        let mut rng = Rng::new(8);
        let folds = stratified_kfold(&labels, 4, &mut rng).unwrap();
        let counts = [11usize, 7, 5];
        for fold in &folds {
            for (c, &total) in counts.iter().enumerate() {
                let n = fold.iter().filter(|&&i| labels[i] == c).count();
                let ideal = total as f64 / 4.0;
                assert!(
                    (n as f64 - ideal).abs() <= 1.0,
                    "class {c}: {n} vs ideal {ideal}"
                );
            }
        }
    }

    #[test]
    fn class_smaller_than_fold_count_is_rejected() {
        let labels = [0, 0, 0, 0, 1, 1];
        let err = stratified_kfold(&labels, 3, &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn default_plan_runs_two_hundred_fold_evaluations() {
        let table: Vec<FeatureVector> = (0..20)
            .map(|i| fv1("x", i as f64 + f64::from(i % 2) * 100.0))
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let params = GbtParams {
            rounds: 1,
            depth: 1,
            ..GbtParams::default()
        };
        let scores = cv_fold_scores(&table, &labels, &CvPlan::default(), &params).unwrap();
        assert_eq!(scores.len(), 200);
    }

    #[test]
    fn separable_data_scores_perfectly_and_deterministically() {
        let mut table = Vec::new();
        let mut labels = Vec::new();
        let mut rng = Rng::new(31);
        for _ in 0..24 {
            let y = rng.below(2);
            table.push(fv1("x", y as f64 * 10.0 + rng.range_f64(-1.0, 1.0)));
            labels.push(y);
        }
        let plan = CvPlan {
            folds: 4,
            shuffles: 3,
            seed: 7,
        };
        let (mean, sd) = cv_score(&table, &labels, &plan, &quick_params()).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(sd, 0.0);
        let again = cv_score(&table, &labels, &plan, &quick_params()).unwrap();
        assert_eq!((mean, sd), again);
    }

    /// Three-model fixture: two carry the label signal through heavy
    /// noise, one is pure noise with enough columns to overfit on, which
    /// drags down whatever subset it joins.
    fn selection_fixture() -> (Vec<String>, Vec<Vec<FeatureVector>>, Vec<usize>) {
        let mut rng = Rng::new(90);
        let n = 30;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let informative_a: Vec<FeatureVector> = labels
            .iter()
            .map(|&y| fv1("a", y as f64 + rng.range_f64(-0.8, 0.8)))
            .collect();
        let informative_b: Vec<FeatureVector> = labels
            .iter()
            .map(|&y| fv1("b", -(y as f64) + rng.range_f64(-0.8, 0.8)))
            .collect();
        let noise: Vec<FeatureVector> = labels
            .iter()
            .map(|_| {
                FeatureVector::new(
                    vec!["n1".into(), "n2".into(), "n3".into()],
                    (0..3).map(|_| rng.range_f64(-2.0, 2.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        (
            vec!["good1".into(), "good2".into(), "noise".into()],
            vec![informative_a, informative_b, noise],
            labels,
        )
    }

    #[test]
    fn backward_elimination_drops_the_noise_model() {
        let (names, per_model, labels) = selection_fixture();
        let plan = CvPlan {
            folds: 3,
            shuffles: 2,
            seed: 5,
        };
        let sel = greedy_select(&names, &per_model, &labels, &plan, &quick_params()).unwrap();
        assert!(
            !sel.kept_names.contains(&"noise".to_string()),
            "kept {:?} with trace {:?}",
            sel.kept_names,
            sel.trace
        );
        for w in sel.trace.windows(2) {
            assert!(w[0] <= w[1], "trace decreased: {:?}", sel.trace);
        }
        assert!(sel.trace.last().unwrap() >= &sel.trace[0]);

        // Exhaustive search over all non-empty subsets for comparison;
        // greedy is not guaranteed optimal but must land close.
        let mut best = 0.0f64;
        for bits in 1u32..8 {
            let subset: Vec<usize> = (0..3).filter(|m| bits & (1 << m) != 0).collect();
            let table = stack_features(&names, &per_model, &subset).unwrap();
            let (mean, _) = cv_score(&table, &labels, &plan, &quick_params()).unwrap();
            best = best.max(mean);
        }
        let final_score = *sel.trace.last().unwrap();
        assert!(
            final_score >= best - 0.02,
            "greedy {final_score} vs exhaustive {best}"
        );
    }

    #[test]
    fn singleton_model_set_is_returned_unchanged() {
        let (names, per_model, labels) = selection_fixture();
        let plan = CvPlan {
            folds: 3,
            shuffles: 1,
            seed: 2,
        };
        let sel = greedy_select(
            &names[..1].to_vec(),
            &per_model[..1].to_vec(),
            &labels,
            &plan,
            &quick_params(),
        )
        .unwrap();
        assert_eq!(sel.kept, vec![0]);
        assert_eq!(sel.trace.len(), 1);
    }

    #[test]
    fn row_count_mismatches_are_rejected() {
        let (names, mut per_model, labels) = selection_fixture();
        per_model[1].pop();
        let err = greedy_select(
            &names,
            &per_model,
            &labels,
            &CvPlan::default(),
            &quick_params(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("good2"), "{err}");
    }
}
