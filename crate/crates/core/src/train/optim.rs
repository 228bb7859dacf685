//! Adam with global-norm clipping and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

pub struct Adam<T: Real> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    /// Clips the stored gradients, applies one update and returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> f64 {
        let norm = store.grad_norm().to_f64().unwrap_or(f64::NAN);
        let clip = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1, b2, eps, clip) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps), T::lit(clip));
        let step = T::lit(lr / c1);
        let c2 = T::lit(c2);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((x, m), v), &g) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                let g = g * clip;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *x = *x - step * *m / ((*v / c2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Cosine decay from `lr` at step 0 to `lr * floor` at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
