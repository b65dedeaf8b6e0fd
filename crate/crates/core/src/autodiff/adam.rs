//! Bias-corrected Adam with decoupled weight decay, plus the EMA shadow
//! update used by the diffusion denoiser.

use std::collections::BTreeMap;

use super::graph::ParamSet;
use super::tensor::Tensor;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        match (self.first_moment.get(name), self.second_moment.get(name)) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        }
    }

    /// Restore optimizer state (checkpoint loading).
    pub fn restore(
        config: AdamConfig,
        first: BTreeMap<String, Vec<f64>>,
        second: BTreeMap<String, Vec<f64>>,
        step_count: u64,
    ) -> Self {
        AdamState { config, first_moment: first, second_moment: second, step_count }
    }

    pub fn export(&self) -> (&BTreeMap<String, Vec<f64>>, &BTreeMap<String, Vec<f64>>, u64) {
        (&self.first_moment, &self.second_moment, self.step_count)
    }
}

/// One optimizer step. Non-finite gradients abort before any parameter is
/// touched; the step counter advances by exactly one otherwise.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(CoreError::non_finite(format!("gradient for {name}")));
        }
        let p = params
            .get(name)
            .ok_or_else(|| CoreError::usage(format!("adam_step: unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(CoreError::shape(format!(
                "adam_step: {name} param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count;
    let c = state.config.clone();
    let bias1 = 1.0 - c.beta1.powi(t as i32);
    let bias2 = 1.0 - c.beta2.powi(t as i32);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let n = p.len();
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let pv = p.values_mut();
        let gv = g.values();
        for i in 0..n {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv[i] * gv[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            pv[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * pv[i]);
        }
    }
    Ok(())
}

/// shadow <- decay * shadow + (1 - decay) * params, elementwise.
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, decay: f64) {
    for (name, sp) in shadow.iter_mut() {
        let p = params.get(name).expect("EMA shadow mirrors parameter names");
        let sv = sp.values_mut();
        for (s, &v) in sv.iter_mut().zip(p.values()) {
            *s = decay * *s + (1.0 - decay) * v;
        }
    }
}
