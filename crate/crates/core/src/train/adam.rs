//! Adam with bias correction and global-norm gradient clipping.

use crate::nn::{GradientMap, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair of buffers per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|e| vec![0.0; e.values.len()]).collect(),
            v: store.iter().map(|e| vec![0.0; e.values.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// Parameters updated; reports the pre-clip global gradient norm.
    Applied { grad_norm: f64 },
    /// Gradient contained NaN/inf; parameters and state untouched.
    SkippedNonFinite,
}

/// One Adam update over every parameter in the store.
///
/// The gradient is scaled by `clip_norm / norm` when its global norm
/// exceeds `clip_norm` (no clipping when `clip_norm <= 0`). A non-finite
/// gradient skips the update entirely.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) -> StepOutcome {
    if grads.has_non_finite() {
        return StepOutcome::SkippedNonFinite;
    }
    let norm = grads.global_norm();
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);

    for pid in store.ids().collect::<Vec<_>>() {
        let g = grads.get(pid);
        let idx = pid.index();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let vals = store.values_mut(pid);
        for i in 0..vals.len() {
            let gi = g[i] * scale;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            vals[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    StepOutcome::Applied { grad_norm: norm }
}
