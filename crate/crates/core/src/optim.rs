//! First-order optimizers over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at step {step}")]
    NonFiniteGradient { step: u64, param: usize },
    #[error("gradient for parameter {param} has shape {got:?}, expected {expected:?}")]
    Shape {
        param: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {got}")]
    Count { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::adam(learning_rate)
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        OptimizerState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update in place. The gradients are validated before any
    /// parameter is touched, so a rejected step leaves `params` unchanged.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Count {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    param: i,
                    got: g.shape().to_vec(),
                    expected: p.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient {
                    step: self.step,
                    param: i,
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let pd = p.data_mut();
            let gd = g.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &gr) in pd.iter_mut().zip(gd) {
                        *w -= c.learning_rate * (gr + c.weight_decay * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for j in 0..pd.len() {
                        let gr = gd[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gr;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gr * gr;
                        let mhat = m[j] / bias1;
                        let vhat = v[j] / bias2;
                        // decoupled weight decay
                        pd[j] -= c.learning_rate
                            * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[j]);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for cfg in [OptimizerConfig::adam(0.1), OptimizerConfig::sgd(0.1)] {
            let mut params = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5])];
            let orig = params.clone();
            let mut st = OptimizerState::new(cfg, &params);
            st.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
            assert_eq!(params, orig);
            assert_eq!(st.step_count(), 1);
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1), &params);
        st.step(&mut params, &[Tensor::scalar(0.5)]).unwrap();
        assert!((params[0].item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.05), &params);
        for _ in 0..1000 {
            let x = params[0].item();
            st.step(&mut params, &[Tensor::scalar(2.0 * (x - 2.0))]).unwrap();
        }
        assert!((params[0].item() - 2.0).abs() < 1e-3, "{}", params[0].item());
    }

    #[test]
    fn nan_gradient_halts_with_step_index() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &params);
        st.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let err = st.step(&mut params, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { step: 1, param: 0 });
        assert_eq!(st.step_count(), 1);
    }
}
