//! Adaptive-moment gradient descent with per-group learning rates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    /// Learning rate for adapters, decoder and upsampler.
    pub lr_head: f64,
    /// Learning rate for the finetuned visual-encoder stages.
    pub lr_encoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_head: 1e-4,
            lr_encoder: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn lr_for(&self, group: &str) -> f64 {
        if group.starts_with("encoder") {
            self.cfg.lr_encoder
        } else {
            self.cfg.lr_head
        }
    }

    /// Applies one update. Gradients for frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        // deterministic update order
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = &grads[&id];
            let lr = self.lr_for(&store.param(id).group);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let value = store.get_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
