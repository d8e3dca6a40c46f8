//! Adam optimizer with a step-halving learning-rate schedule: the rate
//! starts at `lr0` and halves every `half_period` epochs,
//! `lr(e) = lr0 * 2^-(e / half_period)`.

use crate::error::{Error, Result};
use crate::nn::graph::Param;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state: first/second moment estimates per parameter plus the
/// global step counter used for bias correction. Moment arithmetic runs in
/// f64 so the update math is exact to f32 storage precision.
#[derive(Clone, Debug)]
pub struct Adam {
    lr0: f64,
    half_period: usize,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr0: f64, half_period: usize, param_sizes: &[usize]) -> Result<Self> {
        if !lr0.is_finite() || lr0 <= 0.0 {
            return Err(Error::validation(format!("learning rate must be positive, got {lr0}")));
        }
        if half_period == 0 {
            return Err(Error::validation("learning-rate halving period must be at least 1 epoch"));
        }
        Ok(Adam {
            lr0,
            half_period,
            t: 0,
            m: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        })
    }

    /// The conventional configuration: start at 0.01, halve every 20 epochs.
    pub fn with_defaults(param_sizes: &[usize]) -> Self {
        Adam::new(0.01, 20, param_sizes).expect("fixed arguments are valid")
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 2f64.powi(-((epoch / self.half_period) as i32))
    }

    /// How many steps have been applied.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Each parameter must carry a gradient (stored by the
    /// training loop via `Tensor::add_grad`); gradients are consumed. A
    /// non-finite gradient value aborts with a numeric error before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [Param<f32>], epoch: usize) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.tensor.take_grad().ok_or_else(|| {
                Error::validation(format!("parameter {i} has no gradient; run backward first"))
            })?;
            if g.len() != self.m[i].len() {
                return Err(Error::shape(format!(
                    "gradient {i} has {} values, parameter has {}",
                    g.len(),
                    self.m[i].len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "gradient of parameter {i} is not finite at element {j}"
                )));
            }
            grads.push(g);
        }

        self.t += 1;
        let lr = self.lr_at(epoch);
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for (k, val) in p.tensor.values_mut().iter_mut().enumerate() {
                let gk = g[k] as f64;
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *val = (*val as f64 - lr * mhat / (vhat.sqrt() + EPS)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::GraphBuilder;
    use crate::nn::tensor::Tensor;

    fn one_param(values: Vec<f32>) -> Vec<Param<f32>> {
        vec![Param {
            tensor: Tensor::from_vec(&[1, values.len()], values).unwrap(),
            fan_in: None,
        }]
    }

    #[test]
    fn schedule_halves_every_period() {
        let adam = Adam::with_defaults(&[1]);
        assert_eq!(adam.lr_at(0), 0.01);
        assert_eq!(adam.lr_at(19), 0.01);
        assert_eq!(adam.lr_at(20), 0.005);
        assert_eq!(adam.lr_at(39), 0.005);
        assert_eq!(adam.lr_at(40), 0.0025);
        for e in 0..=200 {
            let expect = 0.01 * 2f64.powi(-((e / 20) as i32));
            assert_eq!(adam.lr_at(e), expect, "epoch {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.5, -0.25, 3.0]);
        let before: Vec<u32> = params[0].tensor.values().iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::with_defaults(&[3]);
        for _ in 0..5 {
            params[0].tensor.add_grad(&[0.0, 0.0, 0.0]);
            adam.step(&mut params, 0).unwrap();
        }
        let after: Vec<u32> = params[0].tensor.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = one_param(vec![1.0, -2.0]);
        let mut adam = Adam::with_defaults(&[2]);
        params[0].tensor.add_grad(&[0.5, -0.125]);
        adam.step(&mut params, 0).unwrap();
        let lr = 0.01f64;
        let got = params[0].tensor.values();
        assert!((got[0] as f64 - (1.0 - lr)).abs() <= lr * 1e-6, "{}", got[0]);
        assert!((got[1] as f64 - (-2.0 + lr)).abs() <= lr * 1e-6, "{}", got[1]);
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut params = one_param(vec![1.0]);
        let mut adam = Adam::with_defaults(&[1]);
        params[0].tensor.add_grad(&[f32::NAN]);
        let err = adam.step(&mut params, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = one_param(vec![1.0]);
        let mut adam = Adam::with_defaults(&[1]);
        params[0].tensor.add_grad(&[0.1]);
        adam.step(&mut params, 0).unwrap();
        // The gradient was consumed; stepping again without a new backward
        // pass must fail rather than silently reuse it.
        let err = adam.step(&mut params, 0).unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }

    #[test]
    fn repeated_steps_descend_a_quadratic() {
        // Minimize (w - 3)^2 for a single scalar parameter.
        let mut params = one_param(vec![0.0]);
        let mut adam = Adam::new(0.05, 1000, &[1]).unwrap();
        for _ in 0..800 {
            let w = params[0].tensor.values()[0];
            params[0].tensor.add_grad(&[2.0 * (w - 3.0)]);
            adam.step(&mut params, 0).unwrap();
        }
        let w = params[0].tensor.values()[0];
        assert!((w - 3.0).abs() < 0.05, "converged to {w}");
    }

    #[test]
    fn rejects_bad_configuration_and_mismatched_models() {
        assert!(Adam::new(0.0, 20, &[1]).is_err());
        assert!(Adam::new(0.01, 0, &[1]).is_err());
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.conv1(0, 1).unwrap();
        let mut g = b.finish(y).unwrap();
        let mut adam = Adam::with_defaults(&[999]);
        let err = adam.step(g.params_mut(), 0).unwrap_err();
        assert!(err.to_string().contains("optimizer tracks"));
    }
}
