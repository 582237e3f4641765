//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one pair of buffers per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One Adam update at step `t` (1-based):
///
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², with bias-corrected
/// m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ) and θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    t: usize,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(CoreError::contract("adam_step: t must be ≥ 1".to_string()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::contract(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    for ((param, grad), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if grad.len() != param.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        for ((theta, &g), (m, v)) in
            param.values_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
