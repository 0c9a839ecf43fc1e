use std::collections::BTreeMap;

use crome_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CromeError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments, kept only for trainable parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(store: &ParamStore, trainable: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut st = Self::default();
        for name in trainable {
            let shape = store.require(name)?.shape().to_vec();
            st.m.insert(name.to_string(), Tensor::zeros(&shape));
            st.v.insert(name.to_string(), Tensor::zeros(&shape));
        }
        Ok(st)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }
}

pub fn global_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// One AdamW update over every parameter tracked by `state`. Weight decay
/// is decoupled: `w <- w (1 - lr wd)` before the moment-based step.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for name in state.m.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| CromeError::Contract(format!("no gradient for trainable parameter {name}")))?;
        let w = store.require(name)?;
        if g.shape() != w.shape() {
            return Err(CromeError::Contract(format!(
                "gradient shape {:?} for {name} of shape {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("moments share keys");
        let g = grads[name].data();
        let w = store.get_mut(name).expect("checked above").data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for i in 0..w.len() {
            w[i] *= 1.0 - lr * cfg.weight_decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
