//! Dense tensors used by the network engine.
//!
//! Two shapes appear in practice: feature maps `[n, c, h, w]` and flat
//! feature matrices `[n, f]`. Values are stored row-major (last axis
//! fastest). The element type is generic over [`num_traits::Float`] so the
//! same kernels can run in `f32` for real work and in `f64` for the
//! finite-difference gradient checker.

use num_traits::Float;

use crate::error::{Error, Result};

/// A dense row-major tensor with an optional gradient buffer.
///
/// The gradient buffer is only populated on parameter tensors, by the
/// training loop, between backward and the optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    /// Zero-filled tensor. The shape must be `[n, c, h, w]` or `[n, f]`
    /// with all extents positive.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            values: vec![T::zero(); len],
            grad: None,
        })
    }

    /// Tensor from existing values; the length must match the shape product
    /// and every value must be finite.
    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} implies {len} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!(
                "tensor value at index {pos} is not finite"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// True for `[n, c, h, w]` tensors.
    pub fn is_map(&self) -> bool {
        self.shape.len() == 4
    }

    /// Dimensions of a `[n, c, h, w]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [n, c, h, w] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Dimensions of a `[n, f]` tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, f] => Ok((n, f)),
            _ => Err(Error::shape(format!(
                "expected a [n, f] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Flat index of `(n, c, y, x)`; callers guarantee bounds.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let (_, cs, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.values[self.idx4(n, c, y, x)]
    }

    /// Exact element-wise cast to another float width (`f32` -> `f64` is
    /// lossless, which the gradient checker relies on).
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from(*v).expect("float-to-float cast"))
                .collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from(*v).expect("cast")).collect()),
        }
    }

    /// Accumulate a gradient contribution, allocating the buffer on first use.
    pub fn add_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Remove and return the accumulated gradient, if any.
    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::shape(format!(
            "tensor rank must be 2 (flat) or 4 (map), got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "tensor extents must be positive, got shape {shape:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_has_matching_length() {
        let t: Tensor<f32> = Tensor::zeros(&[2, 3, 4, 5]).unwrap();
        assert_eq!(t.len(), 120);
        assert_eq!(t.dims4().unwrap(), (2, 3, 4, 5));
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(&[1, 3], vec![0.0f32; 4]).unwrap_err();
        assert!(err.to_string().contains("implies 3 values"));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(&[1, 2], vec![1.0f32, f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("not finite"));
    }

    #[test]
    fn rank_must_be_two_or_four() {
        assert!(Tensor::<f32>::zeros(&[3]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 2, 3]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 0, 3, 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(&[1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
        assert_eq!(t.at4(0, 0, 1, 2), 5.0);
        assert_eq!(t.at4(0, 1, 0, 0), 6.0);
        assert_eq!(t.at4(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn cast_to_f64_is_exact() {
        let t = Tensor::from_vec(&[1, 3], vec![0.1f32, -2.5, 1e-20]).unwrap();
        let d = t.cast::<f64>();
        for (a, b) in t.values().iter().zip(d.values()) {
            assert_eq!(*a as f64, *b);
        }
    }

    #[test]
    fn grad_accumulates() {
        let mut t: Tensor<f32> = Tensor::zeros(&[1, 2]).unwrap();
        assert!(t.grad().is_none());
        t.add_grad(&[1.0, 2.0]);
        t.add_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), &[1.5, 1.0]);
        assert_eq!(t.take_grad().unwrap(), vec![1.5, 1.0]);
        assert!(t.grad().is_none());
    }
}
