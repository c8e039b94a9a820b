use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamStore;

use super::TrainConfig;

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update with step size `lr`, after optional
/// global-norm clipping. A non-finite gradient aborts without touching any
/// parameter. Returns the pre-clipping gradient norm.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(Error::dim("adam_step", params.get(i).shape(), g.shape()));
        }
        if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {} has {} at flat index {pos} (step {})",
                params.name(i),
                g.data()[pos],
                state.step + 1
            )));
        }
    }
    let norm = global_norm(grads);
    let scale = match config.gradient_clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.get_mut(i).data_mut();
        for k in 0..w.len() {
            let gk = g.data()[k] * scale;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / correct1;
            let v_hat = v[k] / correct2;
            w[k] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(norm)
}
