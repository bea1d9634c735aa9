//! Adam with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Rescale gradients whose global L2 norm exceeds this; 0 disables.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: 5.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u32,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &[(ParamId, Tensor)]) -> f64 {
        grads
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// One update with learning rate `lr` (lets callers schedule it).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f32) {
        self.step += 1;
        let c = self.cfg;
        let norm = Self::grad_norm(grads);
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm as f64 { (c.clip_norm as f64 / norm) as f32 } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            if !store.entry(*id).trainable {
                continue;
            }
            let i = id.index();
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            let w = store.get_mut(*id).data_mut();
            for k in 0..n {
                let gk = g.data()[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                w[k] -= lr * (update + c.weight_decay * w[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([2], vec![1.0, -1.0]).unwrap(), true);
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        opt.step(&mut store, &[(id, Tensor::new([2], vec![0.5, -0.25]).unwrap())], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-5 && (w[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled([3], 2.0), true);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &[(id, Tensor::filled([3], 1.0))], 0.0);
        assert_eq!(store.get(id).data(), &[2.0; 3]);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("stat", Tensor::filled([2], 1.0), false);
        Adam::new(AdamConfig::default()).step(&mut store, &[(id, Tensor::filled([2], 1.0))], 0.1);
        assert_eq!(store.get(id).data(), &[1.0; 2]);
    }
}
