//! Patch-based classification and segmentation toolkit for whole-slide
//! microscopy images.
//!
//! The crate covers the full desk-scale pipeline: synthetic slide
//! generation, tiling and preprocessing, a small from-scratch neural
//! network stack (encoder/decoder segmentation nets with optional extra
//! convolutions on the skip connections, a patch classifier with spatial
//! pyramid pooling), probability-map postprocessing, binary/multiclass
//! ensembling, evaluation metrics, and gradient-boosted-tree stacking
//! over prediction-derived features.
//!
//! Everything is deterministic given a seed: the same inputs produce the
//! same bytes on every run and platform.

pub mod ensemble;
pub mod error;
pub mod formats;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod rng;
pub mod stacking;
pub mod synth;
pub mod tiling;

pub use error::{Error, Result};
