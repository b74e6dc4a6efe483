use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
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

/// Moment estimates for every parameter that has received a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
    pub step_count: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Pure form: returns updated copies and leaves the inputs untouched.
pub fn adam_step(
    params: &ParamSet,
    grads: &ParamSet,
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(ParamSet, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_update(&mut p, grads, &mut s, cfg)?;
    Ok((p, s))
}

/// In-place bias-corrected Adam. Parameters absent from `grads` are left
/// untouched. On any validation failure nothing is modified.
pub fn adam_update(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::contract(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::dim(format!("gradient {name}"), p.len(), g.len()));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        if !state.first_moment.contains(name) {
            state.first_moment.insert(name.clone(), Tensor::zeros(p.shape()));
            state.second_moment.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        let m = state.first_moment.get_mut(name).expect("inserted");
        let v = state.second_moment.get_mut(name).expect("inserted");
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
