use serde::{Deserialize, Serialize};

use super::NetworkParams;
use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        let n = params.n_params();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut NetworkParams, grads: &NetworkParams, state: &mut OptimizerState) -> Result<()> {
    check_dim("adam state", params.n_params(), state.m.len())?;
    check_dim("adam gradients", params.n_params(), grads.n_params())?;
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let mut at = 0;
    for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
        for (k, (pk, gk)) in p.iter_mut().zip(g).enumerate() {
            let i = at + k;
            state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gk;
            state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gk * gk;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            *pk -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        at += p.len();
    }
    Ok(())
}
