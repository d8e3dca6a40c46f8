//! Finite-difference verification of the analytic gradients.
//!
//! The check probes a scalar functional of the network output (a fixed
//! random weighting of the output entries, so every output position
//! contributes) and compares, for every parameter scalar, the analytic
//! gradient against central differences at step `h = 1e-3`.
//!
//! To keep the tolerance honest the difference quotient is evaluated in
//! f64 on an exact cast of the f32 model: in pure f32 the cancellation in
//! `(f(w+h) - f(w-h)) / 2h` leaves noise of the same order as the 1e-3
//! tolerance, which would make the check flaky rather than meaningful. The
//! report also compares the f32 analytic gradients against the f64 ones so
//! the production precision stays covered.
//!
//! ReLU and max-pooling are piecewise linear, so a ±h perturbation that
//! flips a ReLU sign or a pool argmax straddles a kink where the central
//! difference does not estimate any derivative (it lands near the average
//! of the two one-sided slopes). Those scalars are detected by comparing
//! activation patterns and reported as skipped; the check fails if they are
//! more than a tenth of the total, since that would mean the probe point
//! itself is degenerate.

use num_traits::Float;

use crate::error::Result;
use crate::nn::graph::{Graph, Op};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

const FD_STEP: f64 = 1e-3;
/// Relative errors use `max(|a|, |b|, REL_FLOOR)` as denominator so that
/// near-zero gradients (where the quotient is all noise) are compared on an
/// absolute scale instead.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Number of parameter scalars checked against finite differences.
    pub checked: usize,
    /// Scalars whose ±h perturbation crossed a ReLU/max-pool kink, where
    /// the central difference is not a derivative estimate.
    pub skipped: usize,
    /// Worst per-scalar relative error, finite differences vs analytic.
    pub max_rel_err: f64,
    /// Whole-gradient-vector relative error (L2).
    pub norm_rel_err: f64,
    /// Relative L2 gap between the f32 and f64 analytic gradients.
    pub f32_consistency: f64,
    /// Parameter and element index of the worst scalar.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} scalars ({} on kinks skipped), max rel err {:.3e} (param {} elem {}), norm rel err {:.3e}, f32 consistency {:.3e}, tolerance {:.1e}",
            if self.pass { "pass" } else { "FAIL" },
            self.checked,
            self.skipped,
            self.max_rel_err,
            self.worst.0,
            self.worst.1,
            self.norm_rel_err,
            self.f32_consistency,
            self.tolerance,
        )
    }
}

fn probe_weights(len: usize) -> Vec<f64> {
    // Fixed-seed coefficients; any full-support vector works, randomness
    // just avoids accidental orthogonality to structured outputs.
    let mut rng = Rng::new(0x6772_6164);
    (0..len).map(|_| rng.range_f64(-1.0, 1.0)).collect()
}

fn probe<T: Float>(out: &Tensor<T>, coeffs: &[f64]) -> f64 {
    out.values()
        .iter()
        .zip(coeffs)
        .map(|(v, c)| v.to_f64().expect("float") * c)
        .sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Fingerprint of every decision the piecewise-linear ops make: the sign of
/// each ReLU input and the argmax of each max-pool window. Two weight
/// settings with equal fingerprints lie on the same linear piece, so central
/// differences between them are trustworthy.
fn kink_signature(graph: &Graph<f64>, acts: &[Tensor<f64>]) -> Vec<u8> {
    let mut sig = Vec::new();
    for node in graph.nodes() {
        match node.op {
            Op::Relu => {
                let inp = &acts[node.inputs[0]];
                sig.extend(inp.values().iter().map(|v| u8::from(*v > 0.0)));
            }
            Op::MaxPool2 => {
                let inp = &acts[node.inputs[0]];
                let (n, c, h, w) = inp.dims4().expect("pool input is a map");
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..h / 2 {
                            for x in 0..w / 2 {
                                let mut best = 0u8;
                                let mut bv = inp.at4(s, ch, 2 * y, 2 * x);
                                for (k, (dy, dx)) in
                                    [(0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                                {
                                    let v = inp.at4(s, ch, 2 * y + dy, 2 * x + dx);
                                    if v > bv {
                                        bv = v;
                                        best = k as u8 + 1;
                                    }
                                }
                                sig.push(best);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    sig
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Check every parameter gradient of `graph` at `input`.
pub fn gradcheck(graph: &Graph<f32>, input: &Tensor<f32>, tolerance: f64) -> Result<GradcheckReport> {
    let g64: Graph<f64> = graph.cast();
    let x64: Tensor<f64> = input.cast();

    // Analytic gradients, f64 and f32.
    let acts64 = g64.forward(&x64)?;
    let out64 = &acts64[g64.output_id()];
    let coeffs = probe_weights(out64.len());
    let mut out_grad64 = Tensor::zeros(out64.shape())?;
    for (slot, c) in out_grad64.values_mut().iter_mut().zip(&coeffs) {
        *slot = *c;
    }
    let analytic64: Vec<f64> = g64
        .backward(&acts64, &out_grad64)?
        .params
        .into_iter()
        .flatten()
        .collect();

    let acts32 = graph.forward(input)?;
    let mut out_grad32 = Tensor::zeros(acts32[graph.output_id()].shape())?;
    for (slot, c) in out_grad32.values_mut().iter_mut().zip(&coeffs) {
        *slot = *c as f32;
    }
    let analytic32: Vec<f64> = graph
        .backward(&acts32, &out_grad32)?
        .params
        .into_iter()
        .flatten()
        .map(|v| v as f64)
        .collect();

    // Central differences on the f64 cast, skipping kink crossings.
    let base_sig = kink_signature(&g64, &acts64);
    let base = g64.flat_weights();
    let mut probe_graph = g64.clone();
    let mut fd = vec![0.0f64; base.len()];
    let mut valid = vec![true; base.len()];
    let mut skipped = 0usize;
    let mut w = base.clone();
    for j in 0..base.len() {
        w[j] = base[j] + FD_STEP;
        probe_graph.set_flat_weights(&w)?;
        let acts_plus = probe_graph.forward(&x64)?;
        let plus = probe(&acts_plus[probe_graph.output_id()], &coeffs);
        let crossed = kink_signature(&probe_graph, &acts_plus) != base_sig;
        w[j] = base[j] - FD_STEP;
        probe_graph.set_flat_weights(&w)?;
        let acts_minus = probe_graph.forward(&x64)?;
        let minus = probe(&acts_minus[probe_graph.output_id()], &coeffs);
        let crossed = crossed || kink_signature(&probe_graph, &acts_minus) != base_sig;
        w[j] = base[j];
        if crossed {
            valid[j] = false;
            skipped += 1;
            continue;
        }
        fd[j] = (plus - minus) / (2.0 * FD_STEP);
    }

    let mut max_rel_err = 0.0;
    let mut worst_flat = 0;
    for (j, (f, a)) in fd.iter().zip(&analytic64).enumerate() {
        if !valid[j] {
            continue;
        }
        let e = rel_err(*f, *a);
        if e > max_rel_err {
            max_rel_err = e;
            worst_flat = j;
        }
    }
    // Translate the flat index back to (param, element).
    let mut worst = (0, worst_flat);
    for (pi, p) in graph.params().iter().enumerate() {
        if worst.1 < p.tensor.len() {
            worst.0 = pi;
            break;
        }
        worst.1 -= p.tensor.len();
    }
    let fd_valid: Vec<f64> = (0..base.len()).filter(|&j| valid[j]).map(|j| fd[j]).collect();
    let an_valid: Vec<f64> = (0..base.len())
        .filter(|&j| valid[j])
        .map(|j| analytic64[j])
        .collect();
    let norm_rel_err = norm_rel(&fd_valid, &an_valid);
    let f32_consistency = norm_rel(&analytic32, &analytic64);
    let pass = max_rel_err < tolerance
        && norm_rel_err < tolerance
        && f32_consistency < tolerance
        && skipped * 10 <= base.len();
    Ok(GradcheckReport {
        checked: base.len() - skipped,
        skipped,
        max_rel_err,
        norm_rel_err,
        f32_consistency,
        worst,
        tolerance,
        pass,
    })
}

/// Finite-difference check of a loss input-gradient: `f` maps a tensor to
/// a scalar, `analytic` is the claimed gradient at `x`. Returns the worst
/// per-element relative error.
pub fn check_loss_grad<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = x.values()[j];
        probe.values_mut()[j] = orig + h;
        let plus = f(&probe)?;
        probe.values_mut()[j] = orig - h;
        let minus = f(&probe)?;
        probe.values_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(fd, analytic.values()[j]));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::GraphBuilder;
    use crate::nn::loss::{binary_logloss, softmax_ce, weighted_boundary_logloss};
    use crate::nn::models::{build_classifier, build_tnet, ClassifierSpec, TNetSpec};

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        let vals = (0..n).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect();
        Tensor::from_vec(shape, vals).unwrap()
    }

    #[test]
    fn two_conv_net_passes() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let c1 = b.conv3(0, 3).unwrap();
        let r1 = b.relu(c1).unwrap();
        let c2 = b.conv3(r1, 2).unwrap();
        let mut g = b.finish(c2).unwrap();
        g.init_weights(&mut Rng::new(42));
        let x = random_input(&[1, 1, 8, 8], 43);
        let report = gradcheck(&g, &x, 1e-3).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn every_op_kind_passes_in_one_net() {
        // conv3, relu, maxpool, avgpool, upsample, concat, conv1, sigmoid.
        let mut b = GraphBuilder::<f32>::new(2).unwrap();
        let c1 = b.conv3(0, 4).unwrap();
        let r1 = b.relu(c1).unwrap();
        let mp = b.maxpool2(r1).unwrap();
        let ap = b.avgpool2(r1).unwrap();
        let cat = b.concat(&[mp, ap]).unwrap();
        let c2 = b.conv3(cat, 3).unwrap();
        let up = b.upsample2(c2).unwrap();
        let head = b.conv1(up, 1).unwrap();
        let sg = b.sigmoid(head).unwrap();
        let mut g = b.finish(sg).unwrap();
        for seed in [7u64, 8, 9] {
            g.init_weights(&mut Rng::new(seed));
            let x = random_input(&[2, 2, 6, 6], seed + 100);
            let report = gradcheck(&g, &x, 1e-3).unwrap();
            assert!(report.pass, "seed {seed}: {report}");
        }
    }

    #[test]
    fn classifier_with_pyramid_pooling_passes() {
        let spec = ClassifierSpec {
            blocks: 1,
            base_channels: 3,
            spp_levels: 2,
            classes: 3,
        };
        let mut g = build_classifier(&spec, 2).unwrap();
        g.init_weights(&mut Rng::new(17));
        let x = random_input(&[1, 2, 9, 7], 18);
        let report = gradcheck(&g, &x, 1e-3).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn small_segmenter_with_skip_convs_passes() {
        let spec = TNetSpec {
            depth: 2,
            base_channels: 4,
            skip_convs: 1,
            out_classes: 1,
        };
        let mut g = build_tnet(&spec, 1).unwrap();
        g.init_weights(&mut Rng::new(23));
        let x = random_input(&[1, 1, 8, 8], 24);
        let report = gradcheck(&g, &x, 1e-3).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Sanity check that the checker can fail: compare FD of a sigmoid
        // net against analytic grads taken at different weights.
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let c = b.conv3(0, 2).unwrap();
        let s = b.sigmoid(c).unwrap();
        let mut g = b.finish(s).unwrap();
        g.init_weights(&mut Rng::new(3));
        let x = random_input(&[1, 1, 4, 4], 4);
        let good = gradcheck(&g, &x, 1e-3).unwrap();
        assert!(good.pass, "{good}");

        // Corrupt one weight after computing the analytic gradient by hand:
        // simplest route is to check that the report notices a perturbed
        // model disagrees with the original's finite differences.
        let mut flat = g.flat_weights();
        flat[0] += 0.5;
        let mut g2 = g.clone();
        g2.set_flat_weights(&flat).unwrap();
        let acts = g2.forward(&x.clone()).unwrap();
        let out = &acts[g2.output_id()];
        let coeffs = probe_weights(out.len());
        let mut og = Tensor::zeros(out.shape()).unwrap();
        for (slot, cf) in og.values_mut().iter_mut().zip(&coeffs) {
            *slot = *cf as f32;
        }
        let wrong: Vec<f64> = g2
            .backward(&acts, &og)
            .unwrap()
            .params
            .into_iter()
            .flatten()
            .map(|v| v as f64)
            .collect();
        // FD on g must disagree with analytic grads of g2.
        let g64: Graph<f64> = g.cast();
        let x64 = x.cast::<f64>();
        let base = g64.flat_weights();
        let mut pg = g64.clone();
        let mut w = base.clone();
        let mut any_large = false;
        for j in 0..base.len() {
            w[j] = base[j] + FD_STEP;
            pg.set_flat_weights(&w).unwrap();
            let plus = probe(&pg.run(&x64).unwrap(), &coeffs);
            w[j] = base[j] - FD_STEP;
            pg.set_flat_weights(&w).unwrap();
            let minus = probe(&pg.run(&x64).unwrap(), &coeffs);
            w[j] = base[j];
            if rel_err((plus - minus) / (2.0 * FD_STEP), wrong[j]) > 1e-3 {
                any_large = true;
            }
        }
        assert!(any_large, "perturbed gradients should not match");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(51);
        // Softmax cross-entropy on flat logits and on per-pixel maps.
        let logits = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| rng.range_f64(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let labels = [0usize, 3, 1];
        let (_, grad) = softmax_ce(&logits, &labels).unwrap();
        let worst = check_loss_grad(
            |t| softmax_ce(t, &labels).map(|(l, _)| l),
            &logits,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "softmax flat: {worst}");

        let map = Tensor::from_vec(
            &[1, 3, 2, 2],
            (0..12).map(|_| rng.range_f64(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let pix_labels = [2usize, 0, 1, 1];
        let (_, grad) = softmax_ce(&map, &pix_labels).unwrap();
        let worst = check_loss_grad(
            |t| softmax_ce(t, &pix_labels).map(|(l, _)| l),
            &map,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "softmax map: {worst}");

        // Binary log loss away from the clamp region.
        let probs = Tensor::from_vec(
            &[1, 6],
            (0..6).map(|_| rng.range_f64(0.05, 0.95)).collect(),
        )
        .unwrap();
        let targets = [1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0];
        let (_, grad) = binary_logloss(&probs, &targets).unwrap();
        let worst = check_loss_grad(
            |t| binary_logloss(t, &targets).map(|(l, _)| l),
            &probs,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-6, "binary: {worst}");

        // Weighted boundary loss on an 8x8 map.
        let vals: Vec<f64> = (0..64).map(|_| rng.range_f64(0.05, 0.95)).collect();
        let probs = Tensor::from_vec(&[1, 1, 8, 8], vals).unwrap();
        let mask: Vec<f64> = (0..64).map(|i| f64::from(i % 3 == 0)).collect();
        let weights: Vec<f64> = (0..64).map(|_| rng.range_f64(0.0, 1.0)).collect();
        let (_, grad) = weighted_boundary_logloss(&probs, &mask, &weights).unwrap();
        let worst = check_loss_grad(
            |t| weighted_boundary_logloss(t, &mask, &weights).map(|(l, _)| l),
            &probs,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-6, "weighted: {worst}");
    }
}
