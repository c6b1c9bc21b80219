//! Adam optimizer with bias correction.

use crate::scalar::Scalar;

use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter, plus the step counter.
pub struct AdamState<T: Scalar> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One Adam update. Gradients are read from the parameters' grad buffers
/// (a missing buffer counts as zero gradient); each parameter tensor is
/// replaced by an updated leaf with a cleared gradient. The step counter is
/// incremented before bias correction.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> TensorResult<()> {
    if params.len() != state.m.len() {
        return Err(TensorError::InvalidSpec {
            context: "adam_step",
            message: format!(
                "state tracks {} parameters, got {}",
                state.m.len(),
                params.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let beta1 = T::cast(cfg.beta1);
    let beta2 = T::cast(cfg.beta2);
    let one_m_b1 = T::cast(1.0 - cfg.beta1);
    let one_m_b2 = T::cast(1.0 - cfg.beta2);
    let inv_bc1 = T::cast(1.0 / bc1);
    let inv_bc2 = T::cast(1.0 / bc2);
    let lr = T::cast(cfg.lr);
    let eps = T::cast(cfg.eps);

    for (i, param) in params.iter_mut().enumerate() {
        if param.numel() != state.m[i].len() {
            return Err(TensorError::ShapeMismatch {
                context: "adam_step moments",
                left: param.shape().to_vec(),
                right: vec![state.m[i].len()],
            });
        }
        let grad = param.grad();
        let grad = grad.as_deref().unwrap_or(&[]);
        let mut data = param.data().to_vec();
        for (j, p) in data.iter_mut().enumerate() {
            let g = grad.get(j).copied().unwrap_or(T::zero());
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = beta1 * *m + one_m_b1 * g;
            *v = beta2 * *v + one_m_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *param = Tensor::param(param.shape().to_vec(), data)?;
    }
    Ok(())
}
