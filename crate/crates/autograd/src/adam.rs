use serde::{Deserialize, Serialize};

use crate::{Gradients, Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with a larger global L2 norm are rescaled; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 1.0 }
    }
}

/// Moment estimates for one parameter. `step` counts the updates this
/// parameter actually received, so bias correction stays right for
/// parameters that sit out some steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub slots: Vec<Option<AdamSlot>>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self { slots: vec![None; num_params] }
    }
}

/// One Adam update. Parameters without a gradient entry are left untouched,
/// moments included.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) {
    if state.slots.len() < params.len() {
        state.slots.resize(params.len(), None);
    }
    let norm = grads.global_norm();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };

    for (id, g) in grads.iter() {
        let ParamId(idx) = id;
        let p = params.get_mut(id);
        let slot = state.slots[idx].get_or_insert_with(|| AdamSlot {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
            step: 0,
        });
        slot.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(slot.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.step as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gr = gr * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr * gr;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Linear warm-up to `peak` over `warmup` steps, then `peak·sqrt(warmup/step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseSqrtSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl Default for InverseSqrtSchedule {
    fn default() -> Self {
        Self { peak: 1e-3, warmup: 100 }
    }
}

impl InverseSqrtSchedule {
    /// Learning rate for the 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1);
        if self.warmup == 0 {
            return self.peak;
        }
        if step <= self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else {
            self.peak * (self.warmup as f64 / step as f64).sqrt()
        }
    }
}
