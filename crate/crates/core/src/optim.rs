//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: step counter and first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<S = f64> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { step: 0, m: Vec::new(), v: Vec::new(), config }
    }

    /// Applies one update to `params` and zeroes their gradients.
    /// Moments are allocated on the first call; later calls must pass the
    /// same parameter list.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::State(format!("parameter {i} has no gradient")));
            }
        }
        if self.step == 0 && self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::State("parameter list changed between Adam steps".into()));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::one() - S::of(c.beta1.powi(self.step as i32));
        let bc2 = S::one() - S::of(c.beta2.powi(self.step as i32));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.expect("checked above");
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (S::one() - b1) * g;
                v[k] = b2 * v[k] + (S::one() - b2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] = data[k] - lr * mh / (vh.sqrt() + eps);
                grad[k] = S::zero();
            }
        }
        Ok(())
    }

    /// Steps every trainable tensor of `store`.
    pub fn step_store(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        let mut params = store.trainable_mut();
        self.step(&mut params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Tensor<f64> {
        let mut t = Tensor::new(&[1], vec![v]).unwrap().with_requires_grad(true);
        if let Some(g) = g {
            t.accumulate_grad(&[g]).unwrap();
        }
        t
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad(true);
        p.ensure_grad();
        let mut st = AdamState::new(AdamConfig::default());
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the update is lr / (1 + eps)
        let mut p = param(1.0, Some(1.0));
        let mut st = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
        st.step(&mut [&mut p]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert_eq!(st.step, 1);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut p = param(1.0, None);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(matches!(st.step(&mut [&mut p]), Err(Error::State(_))));
        assert_eq!(st.step, 0);
    }
}
