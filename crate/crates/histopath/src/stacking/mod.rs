//! Second-stage stacking: turn many patch-level prediction matrices into
//! per-slide summary features, fit a boosted-trees classifier on top, and
//! prune the model set by cross-validated backward elimination.

pub mod cv;
pub mod features;
pub mod gbt;

pub use cv::{
    cv_fold_scores, cv_score, greedy_select, stack_features, stratified_kfold, CvPlan, Selection,
};
pub use features::{extract_features, FeatureVector};
pub use gbt::{gbt_train, GbtModel, GbtParams};
