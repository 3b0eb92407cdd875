//! Adam with bias correction and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::toy_policy::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update of `params` against `grad` (a descent direction is taken).
pub fn adam_step(
    params: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.as_slice().len() != grad.as_slice().len() || state.m.len() != grad.as_slice().len() {
        return Err(LabError::invalid("optimizer shapes do not match"));
    }
    if let Some(i) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(LabError::numeric(
            format!("adam step {}", state.t + 1),
            format!("gradient entry {i} is not finite"),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Cosine decay from `peak` at step 0 towards 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
}
