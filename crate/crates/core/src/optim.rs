//! ADAM with bias correction, plus learning-rate schedules.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One ADAM update of `params` in place using step size `lr`.
///
/// Rejects non-finite gradients before touching any state.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient length must match parameters");
    assert_eq!(params.len(), state.m.len(), "ADAM state was sized for a different model");
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * rate^floor(update / every)`.
    ExpDecay { rate: f64, every: usize },
    /// Constant until `start_update`, then linear to zero at the last update.
    LinearDecay { start_update: usize },
}

impl LrSchedule {
    /// Step size for 0-based `update` out of `total` updates.
    pub fn lr(&self, base: f64, update: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::ExpDecay { rate, every } => {
                base * libm::pow(rate, (update / every.max(1)) as f64)
            }
            LrSchedule::LinearDecay { start_update } => {
                if update < start_update || total <= start_update {
                    base
                } else {
                    base * (total - update) as f64 / (total - start_update) as f64
                }
            }
        }
    }
}
