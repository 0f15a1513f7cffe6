//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.95, beta2: 0.9999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        OptimState { config, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn for_params<P: Params>(params: &P, config: AdamConfig) -> Self {
        Self::new(params.num_params(), config)
    }
}

/// One Adam update. Rejects non-finite or shape-mismatched gradients without
/// touching the parameters or the state.
pub fn adam_step<P: Params>(params: &mut P, grads: &P, state: &mut OptimState) -> Result<()> {
    let n = params.num_params();
    if grads.num_params() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Argument("gradient or optimizer state does not match parameter shape".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient, Adam step rejected".into()));
    }
    let c = state.config;
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let mut i = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (w, &gw) in p.iter_mut().zip(g) {
            let m = c.beta1 * state.m[i] + (1.0 - c.beta1) * gw;
            let v = c.beta2 * state.v[i] + (1.0 - c.beta2) * gw * gw;
            state.m[i] = m;
            state.v[i] = v;
            *w -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            i += 1;
        }
    }
    Ok(())
}
