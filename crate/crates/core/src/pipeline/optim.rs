//! AdamW with decoupled weight decay, the linear scaling rule, and a linear-warmup
//! half-cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{bail, Result};
use crate::tensor::{Element, Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moments of one tensor plus its own update count.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub hyper: AdamWConfig,
    pub slots: BTreeMap<ParamId, MomentSlot<T>>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl<T: Element> OptimState<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        OptimState { hyper, slots: BTreeMap::new(), step: 0 }
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.slots.contains_key(&id)
    }
}

/// `lr = base_lr * batch_size / 256`.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    Ok(base_lr * batch_size as f64 / 256.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Linear ramp from 0 at step 0 to `peak` at the end of warmup, then a half cosine
    /// down to 0 at `total_steps`; 0 afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// One AdamW update of every trainable tensor that received a gradient. Tensors
/// without a gradient (unused this step) and non-trainable tensors are untouched.
/// All gradients are checked for finiteness before anything is modified.
pub fn adamw_step<T: Element>(store: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "non-finite gradient in `{}`", store.get(id).name);
        }
        if g.len() != store.value(id).numel() {
            bail!(Dimension, "gradient for `{}` has {} values, tensor has {}", store.get(id).name, g.len(), store.value(id).numel());
        }
    }
    let h = state.hyper;
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - h.beta1), T::lit(1.0 - h.beta2));
    let eps = T::lit(h.eps);
    let lr_t = T::lit(lr);
    for (id, g) in grads.iter() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let decay = if p.decay { T::lit(1.0 - lr * h.weight_decay) } else { T::one() };
        let n = g.len();
        let slot = state.slots.entry(id).or_insert_with(|| MomentSlot { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 });
        slot.step += 1;
        let bc1 = T::lit(1.0 - h.beta1.powi(slot.step as i32));
        let bc2 = T::lit(1.0 - h.beta2.powi(slot.step as i32));
        let theta = store.value_mut(id).data_mut();
        for i in 0..n {
            theta[i] *= decay;
            slot.m[i] = b1 * slot.m[i] + one_b1 * g[i];
            slot.v[i] = b2 * slot.v[i] + one_b2 * g[i] * g[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            theta[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}
