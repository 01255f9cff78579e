//! Global-norm clipping followed by AdamW.

use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// One clipped AdamW update. `decay[i]` says whether tensor `i` receives
/// weight decay. A non-finite gradient leaves params and state untouched.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &mut [Tensor],
    state: &mut AdamState,
    h: &AdamHyper,
    decay: &[bool],
) -> Result<StepStats, super::TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), decay.len());
    if !grads.iter().all(Tensor::is_finite) {
        return Err(super::TrainError::NonFiniteGradient);
    }
    let grad_norm = clip_global_norm(grads, h.clip_norm);
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        assert_eq!(params[i].shape(), grads[i].shape());
        let wd = if decay[i] { h.lr * h.weight_decay } else { 0.0 };
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= wd * p[j];
            p[j] -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(StepStats { grad_norm, clipped_norm: grad_norm.min(h.clip_norm) })
}
