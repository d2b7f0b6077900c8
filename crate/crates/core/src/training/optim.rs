//! AdamW with decoupled weight decay.

use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        AdamWState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update from each parameter's `grad` field.
///
/// Decay `θ ← θ − lr·wd·θ` applies only to parameters flagged `decay`, and
/// separately from the bias-corrected moment step.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    state: &mut AdamWState<S>,
    lr: f64,
    hyper: &AdamWHyper,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (S::of(hyper.beta1), S::of(hyper.beta2));
    let (one_b1, one_b2) = (S::of(1.0 - hyper.beta1), S::of(1.0 - hyper.beta2));
    let (lr_s, eps) = (S::of(lr), S::of(hyper.eps));
    let (inv_bc1, inv_bc2) = (S::of(1.0 / bc1), S::of(1.0 / bc2));
    let decay = S::of(1.0 - lr * hyper.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let apply_decay = p.decay && hyper.weight_decay != 0.0;
        let grad = p.grad.data();
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = b1 * m[k] + one_b1 * g;
            v[k] = b2 * v[k] + one_b2 * g * g;
            if apply_decay {
                *theta = *theta * decay;
            }
            let m_hat = m[k] * inv_bc1;
            let v_hat = v[k] * inv_bc2;
            *theta = *theta - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
