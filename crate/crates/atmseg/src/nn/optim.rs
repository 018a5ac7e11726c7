//! AdamW and the cosine-annealed learning-rate schedule.

use super::graph::ArrD;
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay. Moments are kept per parameter id.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<ArrD>,
    v: Vec<ArrD>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = store.ids().map(|id| ArrD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrD::zeros(store.value(id).raw_dim())).collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, ArrD)], lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (id, grad) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vi, &gi| {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            });
            let p = store.value_mut(*id);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *pi);
            });
        }
    }
}

/// Cosine annealing from `lr_max` (first step) to `lr_min` (last step):
/// lr(t) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi t / (T-1)))
/// for executed steps t = 0..T-1, so both endpoints are hit exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let t = step.min(total_steps - 1) as f64;
    let span = (total_steps - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / span).cos())
}
