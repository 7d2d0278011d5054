use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-tensor moment buffers plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update of a single buffer. `step` is the 1-based step index.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        let mut p = param[i] as f64;
        if cfg.weight_decay != 0.0 {
            p -= cfg.lr as f64 * cfg.weight_decay as f64 * p;
        }
        p -= cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64);
        param[i] = p as f32;
    }
}

/// Applies one Adam step to every named tensor that has a gradient.
/// Tensors without an entry in `grads` are left untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    for (name, grad) in grads {
        let tensor = params
            .get_mut(name)
            .ok_or_else(|| Error::Manifest(format!("gradient for unknown tensor {name}")))?;
        if tensor.numel() != grad.len() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has {} entries, tensor has {}",
                grad.len(),
                tensor.numel()
            )));
        }
        let slot = state.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        adam_update(
            tensor.data_mut(),
            grad,
            &mut slot.m,
            &mut slot.v,
            state.step,
            cfg,
        );
    }
    Ok(())
}
