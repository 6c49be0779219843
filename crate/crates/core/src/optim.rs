//! Losses and AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Gradients, Layer, MaskSet, ModelParams, Tensors};
use crate::numerics::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in {layer} at flat index {index}; step refused")]
    NonFiniteGradient { layer: &'static str, index: usize },
    #[error("optimizer state shapes do not match the parameters")]
    ShapeMismatch,
}

/// `−log softmax(logits)[target]`, computed with max subtraction.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    log_sum - (logits[target] - max)
}

/// Mean of squared differences.
pub fn mse(prediction: &[f64], target: &[f64]) -> f64 {
    assert_eq!(prediction.len(), target.len(), "mse on vectors of different length");
    if prediction.is_empty() {
        return 0.0;
    }
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / prediction.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Decoupled decay coefficient α.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Tensors,
    pub v: Tensors,
    pub t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, like: &Tensors) -> Self {
        let zeros = like.map(|_, m| Matrix::zeros(m.rows(), m.cols()));
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW step on raw tensors.
///
/// Coordinates where `mask` is 0 are left untouched, including their moments.
pub fn adamw_update(
    weights: &mut Tensors,
    grads: &Tensors,
    state: &mut AdamWState,
    mask: Option<&Tensors>,
) -> Result<(), OptimError> {
    if weights.shapes() != grads.shapes()
        || weights.shapes() != state.m.shapes()
        || mask.is_some_and(|m| m.shapes() != weights.shapes())
    {
        return Err(OptimError::ShapeMismatch);
    }
    for l in Layer::ALL {
        if let Some(index) = grads[l].data().iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                layer: l.name(),
                index,
            });
        }
    }
    let c = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    for l in Layer::ALL {
        let w = weights[l].data_mut();
        let g = grads[l].data();
        let m = state.m[l].data_mut();
        let v = state.v[l].data_mut();
        let keep = mask.map(|mk| mk[l].data());
        for i in 0..w.len() {
            if let Some(k) = keep {
                if k[i] == 0.0 {
                    continue;
                }
            }
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps) - c.lr * c.weight_decay * w[i];
        }
    }
    Ok(())
}

/// AdamW step on model parameters under a mask.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamWState,
    masks: Option<&MaskSet>,
) -> Result<(), OptimError> {
    adamw_update(&mut params.weights, &grads.0, state, masks.map(|m| &m.0))
}
