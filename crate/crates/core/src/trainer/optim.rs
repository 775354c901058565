//! Decoupled-weight-decay Adam, the warmup schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::numkit::{ParamGroup, ParamId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then constant.
/// Steps are 1-based.
pub fn warmup_lr(lr_max: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        lr_max
    } else {
        lr_max * step as f64 / warmup as f64
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |_| -> Vec<Vec<T>> { store.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect() };
        Self {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// One update with `grads` (dense, store order) at the given group lrs.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr_fusion: f64, lr_encoder: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let lr = match p.group {
                ParamGroup::Fusion => lr_fusion,
                ParamGroup::Encoder => lr_encoder,
            };
            let decay = if p.no_decay { T::one() } else { T::of(1.0 - lr * c.weight_decay) };
            let step_size = T::of(lr / bc1);
            let rbc2 = T::of(1.0 / bc2.sqrt());
            let eps = T::of(c.eps);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let denom = v[j].sqrt() * rbc2 + eps;
                *w = *w * decay - step_size * m[j] / denom;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
