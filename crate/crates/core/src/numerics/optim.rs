use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::ParamGrads;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for the arrays that have received gradient so far.
///
/// Only elements marked as touched by the backward pass move: moments of
/// untouched elements stay frozen, so weights outside every sampled path
/// are left bit-identical by a step.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, pg) in grads.iter() {
            let param = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                if !pg.touched()[i] {
                    continue;
                }
                let g = pg.grad.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average `running ← (1 − m)·running + m·batch`.
pub fn ema_update(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}
