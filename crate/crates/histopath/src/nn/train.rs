//! Patch-based training loops and full-image prediction.
//!
//! Training draws random patches from the provided slides every step (the
//! dataset is effectively unbounded), computes the loss, and applies one
//! Adam update. All randomness comes from substreams of the configured
//! seed, and the math is single-threaded with fixed reduction order, so a
//! run is bit-reproducible for a given seed and platform.
//!
//! Images are consumed as given; callers are expected to preprocess
//! (typically mean subtraction and scaling into roughly [-1, 1]) before
//! training or prediction, and to apply the same preprocessing at both
//! times.

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, PredMatrix, ProbMap};
use crate::nn::boundary::boundary_weights;
use crate::nn::graph::Graph;
use crate::nn::loss::{binary_logloss, softmax_ce, weighted_boundary_logloss};
use crate::nn::models::ArchDescriptor;
use crate::nn::optim::Adam;
use crate::nn::tensor::Tensor;
use crate::rng::Rng;
use crate::tiling::{crop, crop_mask, random_patch};

/// Knobs shared by the segmentation and classification trainers.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Side length of sampled square patches (segmentation only; the
    /// classifier trains on whole provided patches).
    pub patch_size: usize,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub half_period: usize,
    pub seed: u64,
    /// `Some(d)`: train binary segmenters with the boundary-weighted loss,
    /// ramping weights over `d` pixels.
    pub boundary_ramp: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 20,
            batch_size: 4,
            patch_size: 48,
            lr0: 0.01,
            half_period: 20,
            seed: 0,
            boundary_ramp: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::validation(
                "epochs, steps per epoch and batch size must all be positive",
            ));
        }
        if self.patch_size == 0 {
            return Err(Error::validation("patch size must be positive"));
        }
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::validation(format!(
                "learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if self.half_period == 0 {
            return Err(Error::validation("halving period must be at least 1 epoch"));
        }
        if let Some(d) = self.boundary_ramp {
            if d == 0 {
                return Err(Error::validation("boundary ramp must be at least 1 pixel"));
            }
        }
        Ok(())
    }

    /// Total optimizer steps the configuration will run.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Pack equal-sized images into an NCHW batch tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("cannot build a batch from zero images"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut t = Tensor::zeros(&[images.len(), c, h, w])?;
    for (n, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::shape(format!(
                "batch image {n} is {}x{}x{}, expected {h}x{w}x{c}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let idx = t.idx4(n, ch, y, x);
                    t.values_mut()[idx] = img.sample(y, x, ch);
                }
            }
        }
    }
    Ok(t)
}

fn check_seg_setup(
    graph: &Graph<f32>,
    arch: &ArchDescriptor,
    data: &[(Image, LabelMask)],
    cfg: &TrainConfig,
) -> Result<bool> {
    cfg.validate()?;
    let binary = match arch {
        ArchDescriptor::Segmenter { spec, sigmoid, .. } => {
            if spec.out_classes == 1 && !sigmoid {
                return Err(Error::validation(
                    "single-channel segmenters must end in a sigmoid to train on log loss",
                ));
            }
            if spec.out_classes > 1 && *sigmoid {
                return Err(Error::validation(
                    "multi-class segmenters must emit logits (no sigmoid)",
                ));
            }
            spec.out_classes == 1
        }
        ArchDescriptor::Classifier { .. } => {
            return Err(Error::validation(
                "expected a segmenter architecture, got a classifier",
            ))
        }
    };
    if graph.param_count() != arch.build()?.param_count() {
        return Err(Error::validation(
            "graph does not match the declared architecture (parameter counts differ)",
        ));
    }
    arch.check_input(cfg.patch_size, cfg.patch_size)?;
    if data.is_empty() {
        return Err(Error::validation("no training slides provided"));
    }
    for (i, (img, mask)) in data.iter().enumerate() {
        if img.height() != mask.height() || img.width() != mask.width() {
            return Err(Error::shape(format!(
                "slide {i}: image {}x{} vs mask {}x{}",
                img.height(),
                img.width(),
                mask.height(),
                mask.width()
            )));
        }
        if img.channels() != graph.in_channels() {
            return Err(Error::shape(format!(
                "slide {i} has {} channels, network expects {}",
                img.channels(),
                graph.in_channels()
            )));
        }
        if img.height() < cfg.patch_size || img.width() < cfg.patch_size {
            return Err(Error::validation(format!(
                "slide {i} ({}x{}) is smaller than the {}-pixel patch",
                img.height(),
                img.width(),
                cfg.patch_size
            )));
        }
        if binary && !mask.is_binary() {
            return Err(Error::validation(format!(
                "slide {i}: binary training needs a 0/1 mask (binarize first)"
            )));
        }
    }
    if !binary && cfg.boundary_ramp.is_some() {
        return Err(Error::validation(
            "the boundary-weighted loss applies to binary segmentation only",
        ));
    }
    Ok(binary)
}

/// Train a segmentation network on random patches.
///
/// Single-channel (sigmoid) networks train on binary log loss against the
/// 0/1 mask — or the boundary-weighted variant when `cfg.boundary_ramp` is
/// set. Multi-channel networks train on per-pixel softmax cross-entropy
/// against the class labels.
pub fn train_segmenter(
    graph: &mut Graph<f32>,
    arch: &ArchDescriptor,
    data: &[(Image, LabelMask)],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let binary = check_seg_setup(graph, arch, data, cfg)?;
    let mut rng = Rng::substream(cfg.seed, 1);
    let sizes: Vec<usize> = graph.params().iter().map(|p| p.tensor.len()).collect();
    let mut adam = Adam::new(cfg.lr0, cfg.half_period, &sizes)?;
    let p = cfg.patch_size;
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            // Sample a batch of aligned image/mask patches.
            let mut patches = Vec::with_capacity(cfg.batch_size);
            let mut masks = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let slide = rng.below(data.len());
                let (img, mask) = &data[slide];
                let (y0, x0) = random_patch(img.height(), img.width(), p, &mut rng)?;
                patches.push(crop(img, y0, x0, p, p)?);
                masks.push(crop_mask(mask, y0, x0, p, p)?);
            }
            let refs: Vec<&Image> = patches.iter().collect();
            let input = images_to_tensor(&refs)?;
            let acts = graph.forward(&input)?;
            let out = &acts[graph.output_id()];

            let (loss, out_grad) = if binary {
                let targets: Vec<f32> = masks
                    .iter()
                    .flat_map(|m| m.labels().iter().map(|l| f32::from(*l)))
                    .collect();
                match cfg.boundary_ramp {
                    None => binary_logloss(out, &targets)?,
                    Some(ramp) => {
                        let mut weights = Vec::with_capacity(targets.len());
                        for m in &masks {
                            weights.extend(boundary_weights(m, ramp)?);
                        }
                        weighted_boundary_logloss(out, &targets, &weights)?
                    }
                }
            } else {
                let labels: Vec<usize> = masks
                    .iter()
                    .flat_map(|m| m.labels().iter().map(|l| *l as usize))
                    .collect();
                softmax_ce(out, &labels)?
            };
            if !loss.is_finite() {
                return Err(Error::numeric(format!("training loss became {loss}")));
            }
            epoch_sum += loss;

            let grads = graph.backward(&acts, &out_grad)?;
            for (param, g) in graph.params_mut().iter_mut().zip(&grads.params) {
                param.tensor.add_grad(g);
            }
            adam.step(graph.params_mut(), epoch)?;
        }
        log.epoch_loss.push(epoch_sum / cfg.steps_per_epoch as f64);
    }
    Ok(log)
}

/// Train a patch classifier on labelled patches (softmax cross-entropy).
///
/// Patches may have different sizes — the pyramid pooling head absorbs the
/// variation — so each batch member runs as its own forward/backward pass
/// and the gradients are averaged in sample order.
pub fn train_classifier(
    graph: &mut Graph<f32>,
    arch: &ArchDescriptor,
    data: &[(Image, usize)],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let classes = match arch {
        ArchDescriptor::Classifier { spec, .. } => spec.classes,
        ArchDescriptor::Segmenter { .. } => {
            return Err(Error::validation(
                "expected a classifier architecture, got a segmenter",
            ))
        }
    };
    if graph.param_count() != arch.build()?.param_count() {
        return Err(Error::validation(
            "graph does not match the declared architecture (parameter counts differ)",
        ));
    }
    if data.is_empty() {
        return Err(Error::validation("no training patches provided"));
    }
    for (i, (img, label)) in data.iter().enumerate() {
        if *label >= classes {
            return Err(Error::validation(format!(
                "patch {i} has label {label}, classifier knows {classes} classes"
            )));
        }
        if img.channels() != graph.in_channels() {
            return Err(Error::shape(format!(
                "patch {i} has {} channels, network expects {}",
                img.channels(),
                graph.in_channels()
            )));
        }
        arch.check_input(img.height(), img.width())?;
    }

    let mut rng = Rng::substream(cfg.seed, 1);
    let sizes: Vec<usize> = graph.params().iter().map(|p| p.tensor.len()).collect();
    let mut adam = Adam::new(cfg.lr0, cfg.half_period, &sizes)?;
    let scale = 1.0 / cfg.batch_size as f32;
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let mut step_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let pick = rng.below(data.len());
                let (img, label) = &data[pick];
                let input = images_to_tensor(&[img])?;
                let acts = graph.forward(&input)?;
                let (loss, out_grad) = softmax_ce(&acts[graph.output_id()], &[*label])?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("training loss became {loss}")));
                }
                step_loss += loss;
                let grads = graph.backward(&acts, &out_grad)?;
                for (param, g) in graph.params_mut().iter_mut().zip(&grads.params) {
                    let scaled: Vec<f32> = g.iter().map(|v| v * scale).collect();
                    param.tensor.add_grad(&scaled);
                }
            }
            epoch_sum += step_loss * scale as f64;
            adam.step(graph.params_mut(), epoch)?;
        }
        log.epoch_loss.push(epoch_sum / cfg.steps_per_epoch as f64);
    }
    Ok(log)
}

/// Run a segmentation network over a whole image. Single-channel sigmoid
/// networks yield an unnormalized foreground map; multi-channel networks
/// are softmaxed into a per-pixel distribution.
pub fn predict_probmap(graph: &Graph<f32>, image: &Image) -> Result<ProbMap> {
    let input = images_to_tensor(&[image])?;
    let out = graph.run(&input)?;
    let (_, k, h, w) = out.dims4()?;
    if k == 1 {
        if !graph.ends_with_sigmoid() {
            return Err(Error::validation(
                "single-channel segmenter emits raw scores; expected a sigmoid output",
            ));
        }
        return ProbMap::new(1, h, w, out.values().to_vec(), false);
    }
    if graph.ends_with_sigmoid() {
        return Err(Error::validation(
            "multi-channel segmenter with sigmoid output is ambiguous; emit logits instead",
        ));
    }
    let mut values = vec![0.0f32; k * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(out.at4(0, c, y, x));
            }
            let mut denom = 0.0f32;
            for c in 0..k {
                denom += (out.at4(0, c, y, x) - maxv).exp();
            }
            for c in 0..k {
                values[(c * h + y) * w + x] = (out.at4(0, c, y, x) - maxv).exp() / denom;
            }
        }
    }
    ProbMap::new(k, h, w, values, true)
}

/// Classify a set of patches; one softmaxed probability row per patch.
pub fn predict_class_probs(graph: &Graph<f32>, patches: &[Image]) -> Result<PredMatrix> {
    if patches.is_empty() {
        return Err(Error::validation("no patches to classify"));
    }
    let mut values = Vec::new();
    let mut classes = 0;
    for img in patches {
        let input = images_to_tensor(&[img])?;
        let out = graph.run(&input)?;
        let (_, k) = out.dims2()?;
        classes = k;
        let row = out.values();
        let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let denom: f32 = row.iter().map(|v| (v - maxv).exp()).sum();
        values.extend(row.iter().map(|v| (v - maxv).exp() / denom));
    }
    PredMatrix::new(patches.len(), classes, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::models::{build_classifier, ClassifierSpec, TNetSpec};
    use crate::synth::{synth_slide, SynthSpec};
    use crate::tiling::{mean_subtract, scale_values};

    fn tiny_seg_arch(binary: bool) -> ArchDescriptor {
        ArchDescriptor::segmenter(
            TNetSpec {
                depth: 2,
                base_channels: 4,
                skip_convs: 0,
                out_classes: if binary { 1 } else { 4 },
            },
            3,
            binary,
        )
    }

    fn small_task(seed: u64, binary: bool) -> (Image, LabelMask) {
        let spec = SynthSpec {
            height: 64,
            width: 64,
            class_priors: [0.6, 0.0, 0.0, 0.4],
            blob_range: (1, 2),
            noise_level: 6.0,
        };
        let (img, mask) = synth_slide(&spec, seed).unwrap();
        let img = scale_values(&mean_subtract(&img), 1.0 / 255.0).unwrap();
        let mask = if binary {
            LabelMask::new(
                mask.height(),
                mask.width(),
                mask.labels().iter().map(|l| u8::from(*l > 0)).collect(),
            )
            .unwrap()
        } else {
            mask
        };
        (img, mask)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 4,
            batch_size: 2,
            patch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn binary_training_is_bit_reproducible_per_seed() {
        let arch = tiny_seg_arch(true);
        let data = vec![small_task(5, true)];
        let run = |seed: u64| {
            let mut g = arch.build().unwrap();
            g.init_weights(&mut Rng::new(77));
            let cfg = TrainConfig {
                seed,
                ..quick_cfg()
            };
            let log = train_segmenter(&mut g, &arch, &data, &cfg).unwrap();
            (g.flat_weights(), log)
        };
        let (w1, l1) = run(9);
        let (w2, l2) = run(9);
        assert_eq!(l1, l2);
        let bits = |w: &[f32]| w.iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
        assert_eq!(bits(&w1), bits(&w2));
        let (w3, _) = run(10);
        assert_ne!(bits(&w1), bits(&w3), "different seed should diverge");
    }

    #[test]
    fn binary_training_reduces_loss() {
        let arch = tiny_seg_arch(true);
        let data = vec![small_task(6, true)];
        let mut g = arch.build().unwrap();
        g.init_weights(&mut Rng::new(3));
        let cfg = TrainConfig {
            epochs: 6,
            steps_per_epoch: 8,
            batch_size: 2,
            patch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let log = train_segmenter(&mut g, &arch, &data, &cfg).unwrap();
        let first = log.epoch_loss[0];
        let last = *log.epoch_loss.last().unwrap();
        assert!(
            last < first,
            "loss should fall: first {first}, last {last}"
        );
    }

    #[test]
    fn boundary_weighted_training_runs_and_learns() {
        let arch = tiny_seg_arch(true);
        let data = vec![small_task(7, true)];
        let mut g = arch.build().unwrap();
        g.init_weights(&mut Rng::new(13));
        let cfg = TrainConfig {
            epochs: 4,
            steps_per_epoch: 8,
            batch_size: 2,
            patch_size: 16,
            seed: 14,
            boundary_ramp: Some(4),
            ..TrainConfig::default()
        };
        let log = train_segmenter(&mut g, &arch, &data, &cfg).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
    }

    #[test]
    fn multiclass_training_runs() {
        let arch = tiny_seg_arch(false);
        let data = vec![small_task(8, false)];
        let mut g = arch.build().unwrap();
        g.init_weights(&mut Rng::new(15));
        let log = train_segmenter(&mut g, &arch, &data, &quick_cfg()).unwrap();
        assert_eq!(log.epoch_loss.len(), 2);
        assert!(log.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn setup_validation_catches_mismatches() {
        let arch = tiny_seg_arch(true);
        let mut g = arch.build().unwrap();
        // Non-binary mask for binary training.
        let data = vec![small_task(8, false)];
        let err = train_segmenter(&mut g, &arch, &data, &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("binary"), "{err}");
        // Boundary loss rejected for multiclass.
        let arch4 = tiny_seg_arch(false);
        let mut g4 = arch4.build().unwrap();
        let data4 = vec![small_task(8, false)];
        let cfg = TrainConfig {
            boundary_ramp: Some(4),
            ..quick_cfg()
        };
        let err = train_segmenter(&mut g4, &arch4, &data4, &cfg).unwrap_err();
        assert!(err.to_string().contains("binary segmentation only"), "{err}");
        // Patch larger than the slide.
        let cfg = TrainConfig {
            patch_size: 128,
            ..quick_cfg()
        };
        let data = vec![small_task(8, true)];
        assert!(train_segmenter(&mut g, &arch, &data, &cfg).is_err());
    }

    #[test]
    fn classifier_training_handles_mixed_patch_sizes() {
        let spec = ClassifierSpec {
            blocks: 1,
            base_channels: 4,
            spp_levels: 2,
            classes: 2,
        };
        let arch = ArchDescriptor::classifier(spec, 3);
        let mut g = build_classifier(&spec, 3).unwrap();
        g.init_weights(&mut Rng::new(31));
        // Class 0: dark patches; class 1: bright patches; varying sizes.
        let mut data = Vec::new();
        for (i, side) in [12usize, 16, 20, 14, 18, 24].iter().enumerate() {
            let value = if i % 2 == 0 { 0.1f32 } else { 0.9 };
            let img =
                Image::new_f32(*side, *side, 3, vec![value; side * side * 3]).unwrap();
            data.push((img, i % 2));
        }
        let cfg = TrainConfig {
            epochs: 6,
            steps_per_epoch: 6,
            batch_size: 3,
            seed: 2,
            ..TrainConfig::default()
        };
        let log = train_classifier(&mut g, &arch, &data, &cfg).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
        // The trained classifier should separate the two patch kinds.
        let patches: Vec<Image> = data.iter().map(|(img, _)| img.clone()).collect();
        let preds = predict_class_probs(&g, &patches).unwrap();
        let labels = preds.argmax_labels();
        let truth: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        let correct = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(correct >= 5, "classifier got {correct}/6");
    }

    #[test]
    fn classifier_rejects_out_of_range_labels() {
        let spec = ClassifierSpec {
            blocks: 1,
            base_channels: 2,
            spp_levels: 1,
            classes: 2,
        };
        let arch = ArchDescriptor::classifier(spec, 1);
        let mut g = build_classifier(&spec, 1).unwrap();
        let img = Image::new_f32(8, 8, 1, vec![0.0; 64]).unwrap();
        let err = train_classifier(&mut g, &arch, &[(img, 2)], &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("label 2"));
    }

    #[test]
    fn probmap_prediction_shapes_and_normalization() {
        let arch = tiny_seg_arch(true);
        let mut g = arch.build().unwrap();
        g.init_weights(&mut Rng::new(41));
        let (img, _) = small_task(11, true);
        let pm = predict_probmap(&g, &img).unwrap();
        assert_eq!((pm.classes(), pm.height(), pm.width()), (1, 64, 64));
        assert!(!pm.normalized());

        let arch4 = tiny_seg_arch(false);
        let mut g4 = arch4.build().unwrap();
        g4.init_weights(&mut Rng::new(42));
        let pm4 = predict_probmap(&g4, &img).unwrap();
        assert_eq!(pm4.classes(), 4);
        assert!(pm4.normalized());
    }
}
