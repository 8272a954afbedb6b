use alloc::vec::Vec;

use crate::params::ParamStore;

/// Adaptive-moment optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| alloc::vec![0.0; t.len()]).collect();
        Self { cfg, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (((t, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
            }
        }
    }
}
