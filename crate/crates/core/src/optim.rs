//! Adam without weight decay.
//!
//! A parameter whose gradient has been exactly zero since the last `reset`
//! keeps zero moments and therefore receives an update of exactly zero, which
//! is what keeps read-only memory cells bit-identical across tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    moments: BTreeMap<usize, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Forgets all moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// any `update`.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Returns the update to subtract from parameter `slot` given its gradient.
    pub fn update(&mut self, slot: usize, grad: &Tensor) -> Tensor {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step.max(1);
        let (m, v) = self
            .moments
            .entry(slot)
            .or_insert_with(|| (Tensor::zeros(grad.raw_dim()), Tensor::zeros(grad.raw_dim())));
        m.zip_mut_with(grad, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
        v.zip_mut_with(grad, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = m.clone();
        out.zip_mut_with(v, |m, &v| *m = lr * (*m / c1) / ((v / c2).sqrt() + eps));
        out
    }
}
