//! Adam with bias correction and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::{NeuralError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), NeuralError> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: vec![params.len()],
                found: vec![grads.len()],
            });
        }
        for ((id, g), m) in grads.iter().zip(&self.first_moment) {
            if g.shape() != params.get(id).shape() || m.shape() != g.shape() {
                return Err(NeuralError::ShapeMismatch {
                    expected: params.get(id).shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        if !grads.is_finite() {
            return Err(NeuralError::NonFinite("gradient"));
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
