use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Gradient buffers keyed by parameter name.
pub type Gradients = IndexMap<String, Vec<f32>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: IndexMap<String, Vec<f32>>,
    pub second: IndexMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        let zeros: IndexMap<String, Vec<f32>> = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
            .collect();
        OptimizerState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Reads the accumulated gradient of every parameter; zeros where none
/// reached it.
pub fn collect_gradients(params: &ParamSet<f32>) -> Gradients {
    params
        .iter()
        .map(|(name, t)| (name.to_string(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect()
}

/// One bias-corrected Adam update; returns the new parameters as constant
/// leaves.
pub fn adam_step(
    params: &ParamSet<f32>,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<ParamSet<f32>> {
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let correction1 = (1.0 - beta1.powi(t)) as f32;
    let correction2 = (1.0 - beta2.powi(t)) as f32;
    let (b1, b2, lr, eps) = (beta1 as f32, beta2 as f32, lr as f32, eps as f32);

    let mut updated = ParamSet::new();
    for (name, param) in params.iter() {
        let missing = || Error::MissingParameter(name.to_string());
        let g = grads.get(name).ok_or_else(missing)?;
        let m = state.first.get_mut(name).ok_or_else(missing)?;
        let v = state.second.get_mut(name).ok_or_else(missing)?;
        if g.len() != param.numel() || m.len() != param.numel() || v.len() != param.numel() {
            return Err(Error::shape("adam_step", format!("buffers for `{name}` do not match {}", param.shape())));
        }
        let mut data = param.to_vec();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        updated.insert(name, Tensor::new(param.dims().to_vec(), data)?);
    }
    Ok(updated)
}
