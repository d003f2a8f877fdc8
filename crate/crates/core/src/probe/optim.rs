//! AdamW with decoupled weight decay and bias correction.

use super::{ProbeError, ProbeParams, TENSOR_NAMES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: ProbeParams,
    pub second_moment: ProbeParams,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &ProbeParams, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            config,
        }
    }
}

/// One AdamW update of `params` in place:
///
/// ```text
/// m ← β1·m + (1-β1)·g          v ← β2·v + (1-β2)·g²
/// m̂ = m / (1-β1^t)             v̂ = v / (1-β2^t)
/// w ← w - lr·wd·w - lr·m̂ / (√v̂ + eps)
/// ```
///
/// Nothing is modified when a gradient component is not finite.
pub fn adamw_step(params: &mut ProbeParams, grads: &ProbeParams, state: &mut OptimizerState) -> Result<(), ProbeError> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(ProbeError::GradientShape);
    }
    for (t, g) in grads.tensors().iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFiniteGradient {
                tensor: TENSOR_NAMES[t],
                index,
            });
        }
    }

    let c = state.config;
    state.step += 1;
    let bias1 = 1.0 - c.beta1.powi(state.step as i32);
    let bias2 = 1.0 - c.beta2.powi(state.step as i32);
    let decay = c.lr * c.weight_decay;

    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut());
    for (((w, g), m), v) in tensors {
        for i in 0..w.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] - decay * w[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}
