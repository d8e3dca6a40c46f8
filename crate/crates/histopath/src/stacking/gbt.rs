//! A small second-order gradient-boosted-trees classifier.
//!
//! Multiclass via one-vs-rest regression trees under a softmax objective:
//! each boosting round fits one depth-limited tree per class on the
//! class-wise gradient/hessian of the logistic loss, exactly as the
//! standard boosting derivation prescribes (leaf weight -G/(H+lambda),
//! split gain from the same statistics). Splits are exact greedy over
//! sorted feature values — desk-scale tables need no histogram
//! approximations. Training is fully deterministic: ties between candidate
//! splits resolve to the lower feature index, then the lower threshold.
//!
//! Scores start at the log of the empirical class priors, so a model with
//! zero rounds predicts the prior distribution for every row. Feature
//! columns are tracked by name: prediction rows may order their columns
//! differently from the training table and are remapped before traversal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacking::features::FeatureVector;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GbtParams {
    /// Boosting rounds (trees per class).
    pub rounds: usize,
    /// Maximum split depth per tree (1 = stumps).
    pub depth: usize,
    /// Shrinkage applied to every leaf weight.
    pub eta: f64,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            rounds: 30,
            depth: 3,
            eta: 0.3,
            lambda: 1.0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("tree depth must be at least 1"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::validation(format!(
                "learning rate must be positive and finite, got {}",
                self.eta
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::validation(format!(
                "lambda must be non-negative and finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Binary tree stored as a flat node list; node 0 is the root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TreeNode {
    /// Rows with `value < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { weight: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf_weight(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GbtModel {
    pub classes: usize,
    pub params: GbtParams,
    /// Canonical column order; prediction rows are remapped to this.
    pub feature_names: Vec<String>,
    /// Log-prior starting score per class.
    pub base_scores: Vec<f64>,
    /// `rounds * classes` trees, round-major.
    pub trees: Vec<Tree>,
    /// Training-set softmax log loss after each round (diagnostics).
    pub train_losses: Vec<f64>,
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn mean_logloss(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut probs = vec![0.0; scores[0].len()];
    for (row, &y) in scores.iter().zip(labels) {
        softmax_into(row, &mut probs);
        total -= probs[y].max(1e-15).ln();
    }
    total / scores.len() as f64
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best exact split of `rows` (indices into the table) by gain.
fn best_split(
    table: &[Vec<f64>],
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    lambda: f64,
) -> Option<SplitChoice> {
    let n_features = table[0].len();
    let g_total: f64 = rows.iter().map(|&i| grad[i]).sum();
    let h_total: f64 = rows.iter().map(|&i| hess[i]).sum();
    let parent = g_total * g_total / (h_total + lambda);

    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| {
            table[a][f]
                .partial_cmp(&table[b][f])
                .expect("finite features")
        });
        let mut g_left = 0.0;
        let mut h_left = 0.0;
        for w in 0..order.len() - 1 {
            let i = order[w];
            g_left += grad[i];
            h_left += hess[i];
            let lo = table[i][f];
            let hi = table[order[w + 1]][f];
            if lo == hi {
                continue; // identical values cannot be separated
            }
            let threshold = lo + (hi - lo) / 2.0;
            let g_right = g_total - g_left;
            let h_right = h_total - h_left;
            let gain = g_left * g_left / (h_left + lambda)
                + g_right * g_right / (h_right + lambda)
                - parent;
            let better = match &best {
                None => gain > 1e-12,
                Some(b) => gain > b.gain + 1e-12,
            };
            if better {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

fn grow_tree(
    table: &[Vec<f64>],
    rows: Vec<usize>,
    grad: &[f64],
    hess: &[f64],
    params: &GbtParams,
    depth_left: usize,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let make_leaf = |nodes: &mut Vec<TreeNode>, rows: &[usize]| {
        let g: f64 = rows.iter().map(|&i| grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| hess[i]).sum();
        nodes.push(TreeNode::Leaf {
            weight: -g / (h + params.lambda),
        });
        nodes.len() - 1
    };

    if depth_left == 0 || rows.len() < 2 {
        return make_leaf(nodes, &rows);
    }
    let Some(split) = best_split(table, &rows, grad, hess, params.lambda) else {
        return make_leaf(nodes, &rows);
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .into_iter()
        .partition(|&i| table[i][split.feature] < split.threshold);
    let at = nodes.len();
    nodes.push(TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: 0,
        right: 0,
    });
    let left = grow_tree(table, left_rows, grad, hess, params, depth_left - 1, nodes);
    let right = grow_tree(table, right_rows, grad, hess, params, depth_left - 1, nodes);
    if let TreeNode::Split {
        left: l, right: r, ..
    } = &mut nodes[at]
    {
        *l = left;
        *r = right;
    }
    at
}

/// Fit a boosted-trees classifier on a feature table. Every row must carry
/// the same feature names in the same order; labels are class indices and
/// at least two distinct classes must be present.
pub fn gbt_train(
    table: &[FeatureVector],
    labels: &[usize],
    params: &GbtParams,
) -> Result<GbtModel> {
    params.validate()?;
    if table.is_empty() {
        return Err(Error::validation("cannot train on an empty table"));
    }
    if table.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} rows but {} labels",
            table.len(),
            labels.len()
        )));
    }
    let feature_names = table[0].names().to_vec();
    for (i, fv) in table.iter().enumerate() {
        if fv.names() != feature_names.as_slice() {
            return Err(Error::validation(format!(
                "row {i} feature names disagree with row 0"
            )));
        }
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::validation(
            "training labels contain a single class; nothing to separate",
        ));
    }

    let n = table.len();
    let rows: Vec<Vec<f64>> = table.iter().map(|fv| fv.values().to_vec()).collect();
    // Empty classes get a floor so their log prior stays finite.
    let base_scores: Vec<f64> = counts
        .iter()
        .map(|&c| ((c as f64 / n as f64).max(1e-12)).ln())
        .collect();

    let mut scores: Vec<Vec<f64>> = vec![base_scores.clone(); n];
    let mut trees = Vec::with_capacity(params.rounds * classes);
    let mut train_losses = Vec::with_capacity(params.rounds);
    let mut probs = vec![0.0f64; classes];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];

    for _round in 0..params.rounds {
        // Gradients for all classes come from the probabilities at the
        // start of the round, per the usual one-round-per-class layout.
        let mut grads_by_class = vec![vec![0.0f64; n]; classes];
        let mut hess_by_class = vec![vec![0.0f64; n]; classes];
        for (i, row) in scores.iter().enumerate() {
            softmax_into(row, &mut probs);
            for (k, &p) in probs.iter().enumerate() {
                let y = f64::from(labels[i] == k);
                grads_by_class[k][i] = p - y;
                hess_by_class[k][i] = (p * (1.0 - p)).max(1e-16);
            }
        }
        for k in 0..classes {
            grad.copy_from_slice(&grads_by_class[k]);
            hess.copy_from_slice(&hess_by_class[k]);
            let mut nodes = Vec::new();
            grow_tree(
                &rows,
                (0..n).collect(),
                &grad,
                &hess,
                params,
                params.depth,
                &mut nodes,
            );
            let tree = Tree { nodes };
            for (i, row) in rows.iter().enumerate() {
                scores[i][k] += params.eta * tree.leaf_weight(row);
            }
            trees.push(tree);
        }
        train_losses.push(mean_logloss(&scores, labels));
    }

    Ok(GbtModel {
        classes,
        params: *params,
        feature_names,
        base_scores,
        trees,
        train_losses,
    })
}

impl GbtModel {
    /// Map a prediction row's columns onto the training order by name.
    fn remap(&self, row: &FeatureVector) -> Result<Vec<f64>> {
        if row.names() == self.feature_names.as_slice() {
            return Ok(row.values().to_vec());
        }
        let mut out = Vec::with_capacity(self.feature_names.len());
        for name in &self.feature_names {
            match row.get(name) {
                Some(v) => out.push(v),
                None => {
                    return Err(Error::validation(format!(
                        "prediction row is missing feature '{name}'"
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Class probabilities for one feature row.
    pub fn predict(&self, row: &FeatureVector) -> Result<Vec<f64>> {
        let values = self.remap(row)?;
        let mut scores = self.base_scores.clone();
        for (t, tree) in self.trees.iter().enumerate() {
            let k = t % self.classes;
            scores[k] += self.params.eta * tree.leaf_weight(&values);
        }
        let mut probs = vec![0.0; self.classes];
        softmax_into(&scores, &mut probs);
        Ok(probs)
    }

    /// Most probable class per row; ties go to the lower index.
    pub fn predict_labels(&self, table: &[FeatureVector]) -> Result<Vec<usize>> {
        table
            .iter()
            .map(|row| {
                let p = self.predict(row)?;
                let mut best = 0;
                for (k, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = k;
                    }
                }
                Ok(best)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("serializing model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: GbtModel = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("parsing model: {e}")))?;
        if model.trees.len() != model.params.rounds * model.classes {
            return Err(Error::validation(format!(
                "model holds {} trees, expected rounds*classes = {}",
                model.trees.len(),
                model.params.rounds * model.classes
            )));
        }
        Ok(model)
    }
}
