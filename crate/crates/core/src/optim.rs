//! Adam with the inverse-square-root warmup schedule of the reference
//! transformer recipe.

use serde::{Deserialize, Serialize};

use crate::graph::GradBuffer;
use crate::params::ParamStore;
use crate::tensor::{real, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Multiplier on `dim^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_scale: 1.0,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    /// Learning rate for 1-based `step`.
    pub fn learning_rate(&self, step: u64, model_dim: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.lr_scale * (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// One update. Parameters whose gradient and moments are all zero are
    /// left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradBuffer<T>,
        config: &OptimConfig,
        lr: f64,
    ) {
        self.step += 1;
        let b1: T = real(config.beta1);
        let b2: T = real(config.beta2);
        let one = T::one();
        let c1 = 1.0 - config.beta1.powi(self.step as i32);
        let c2 = 1.0 - config.beta2.powi(self.step as i32);
        let step_size: T = real(lr * c2.sqrt() / c1);
        let eps: T = real(config.eps * c2.sqrt());
        let clip = match config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    real(max / norm)
                } else {
                    one
                }
            }
            None => one,
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            if g.iter().all(|x| *x == T::zero()) && m.iter().all(|x| *x == T::zero()) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() + eps);
            }
        }
    }
}
