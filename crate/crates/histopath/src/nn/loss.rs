//! Training losses. Each returns the scalar loss (as `f64`, for logging)
//! plus the gradient with respect to the network output, ready to feed into
//! `Graph::backward`.
//!
//! Probabilities are clamped to `[1e-7, 1 - 1e-7]` before taking logs; on
//! the clamped flats the gradient is zero, consistent with the forward
//! value (the finite-difference checks depend on that consistency).

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const CLAMP_EPS: f64 = 1e-7;

/// Mean softmax cross-entropy. `logits` is either `[n, k]` with one label
/// per row, or `[n, k, h, w]` with one label per pixel (sample-major,
/// row-major within a sample). Labels must be below `k`.
pub fn softmax_ce<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (positions, k, stride) = match logits.shape() {
        &[n, k] => (n, k, 1),
        &[n, k, h, w] => (n * h * w, k, h * w),
        other => {
            return Err(Error::shape(format!(
                "softmax cross-entropy expects [n, k] or [n, k, h, w] logits, got {other:?}"
            )))
        }
    };
    if k < 2 {
        return Err(Error::validation("softmax cross-entropy needs at least two classes"));
    }
    if labels.len() != positions {
        return Err(Error::shape(format!(
            "{} labels for {positions} logit positions",
            labels.len()
        )));
    }
    let mut grad = vec![T::zero(); logits.len()];
    let inv_count = T::from(1.0 / positions as f64).expect("cast");
    let mut loss = 0.0f64;
    let vals = logits.values();
    for pos in 0..positions {
        // For flat logits stride is 1 and positions run over rows; for maps
        // the k class values of pixel `pos` sit `stride` apart.
        let sample = pos / stride;
        let pixel = pos % stride;
        let base = sample * k * stride + pixel;
        let label = labels[pos];
        if label >= k {
            return Err(Error::validation(format!(
                "label {label} at position {pos} out of range for {k} classes"
            )));
        }
        let mut maxv = vals[base];
        for c in 1..k {
            let v = vals[base + c * stride];
            if v > maxv {
                maxv = v;
            }
        }
        let mut denom = T::zero();
        for c in 0..k {
            denom = denom + (vals[base + c * stride] - maxv).exp();
        }
        let log_denom = denom.ln();
        for c in 0..k {
            let logp = vals[base + c * stride] - maxv - log_denom;
            let p = logp.exp();
            let target = if c == label { T::one() } else { T::zero() };
            grad[base + c * stride] = (p - target) * inv_count;
            if c == label {
                loss -= logp.to_f64().expect("float");
            }
        }
    }
    loss /= positions as f64;
    let mut g = Tensor::zeros(logits.shape())?;
    g.values_mut().copy_from_slice(&grad);
    Ok((loss, g))
}

/// Mean binary log loss between predicted probabilities and targets in
/// `[0, 1]` (hard 0/1 targets or soft ones both work).
pub fn binary_logloss<T: Float>(probs: &Tensor<T>, targets: &[T]) -> Result<(f64, Tensor<T>)> {
    if targets.len() != probs.len() {
        return Err(Error::shape(format!(
            "{} targets for {} predicted values",
            targets.len(),
            probs.len()
        )));
    }
    if let Some(pos) = targets
        .iter()
        .position(|t| *t < T::zero() || *t > T::one())
    {
        return Err(Error::validation(format!(
            "target at index {pos} outside [0, 1]"
        )));
    }
    let eps = T::from(CLAMP_EPS).expect("cast");
    let lo = eps;
    let hi = T::one() - eps;
    let inv_count = T::from(1.0 / probs.len() as f64).expect("cast");
    let mut grad = vec![T::zero(); probs.len()];
    let mut loss = 0.0f64;
    for (i, (&p, &t)) in probs.values().iter().zip(targets).enumerate() {
        let clamped = p < lo || p > hi;
        let q = if p < lo {
            lo
        } else if p > hi {
            hi
        } else {
            p
        };
        let term = -(t * q.ln() + (T::one() - t) * (T::one() - q).ln());
        loss += term.to_f64().expect("float");
        if !clamped {
            grad[i] = (q - t) / (q * (T::one() - q)) * inv_count;
        }
    }
    loss /= probs.len() as f64;
    let mut g = Tensor::zeros(probs.shape())?;
    g.values_mut().copy_from_slice(&grad);
    Ok((loss, g))
}

/// Binary log loss against a softened ground truth: the target at each
/// pixel is `weight * mask`, so positives near region boundaries (where the
/// weight ramps down to zero) count less, exactly as if the mask itself had
/// been attenuated. With all weights 1 this is plain [`binary_logloss`].
pub fn weighted_boundary_logloss<T: Float>(
    probs: &Tensor<T>,
    mask: &[T],
    weights: &[T],
) -> Result<(f64, Tensor<T>)> {
    if mask.len() != probs.len() || weights.len() != probs.len() {
        return Err(Error::shape(format!(
            "prediction/mask/weight lengths disagree: {} vs {} vs {}",
            probs.len(),
            mask.len(),
            weights.len()
        )));
    }
    if let Some(pos) = mask
        .iter()
        .position(|m| *m != T::zero() && *m != T::one())
    {
        return Err(Error::validation(format!(
            "mask value at index {pos} is not 0 or 1"
        )));
    }
    if let Some(pos) = weights
        .iter()
        .position(|w| *w < T::zero() || *w > T::one())
    {
        return Err(Error::validation(format!(
            "boundary weight at index {pos} outside [0, 1]"
        )));
    }
    let soft: Vec<T> = mask.iter().zip(weights).map(|(m, w)| *m * *w).collect();
    binary_logloss(probs, &soft)
}
