//! AdamW with decoupled weight decay and a warmup + cosine schedule.
//!
//! One step on parameter θ with gradient g at step index t (0-based):
//!
//! ```text
//! C      = schedule_lr(t)
//! m      = β1·m + (1-β1)·g
//! v      = β2·v + (1-β2)·g²
//! θ̂      = θ - C · m̂ / (√v̂ + eps)        (m̂, v̂ bias-corrected with t+1)
//! θ_next = θ̂ - λ·C·θ
//! ```
//!
//! The decay term uses the pre-update θ and is applied only to 2-D
//! matrices; norm gains are never decayed.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer hyperparameters: {0}")]
    Hyper(String),
    #[error("step {step} is outside 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite gradient in `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight-decay coefficient λ.
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            total_steps: 1000,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Hyper(m.to_string()));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("need 0 <= warmup_frac < 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("need 0 <= beta1, beta2 < 1");
        }
        if !(self.eps > 0.0) {
            return bad("need eps > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("need weight_decay >= 0");
        }
        if self.total_steps == 0 {
            return bad("need total_steps >= 1");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).ceil() as u64
    }
}

/// Learning rate at `step`: linear ramp from 0 to `lr_max` over the first
/// `ceil(warmup_frac · total_steps)` steps, then cosine decay to `lr_min`
/// at `total_steps`.
pub fn schedule_lr(step: u64, hyper: &OptimHyper) -> Result<f64, OptimError> {
    let total = hyper.total_steps;
    if step > total {
        return Err(OptimError::StepOutOfRange { step, total });
    }
    let warmup = hyper.warmup_steps();
    if step < warmup || (step == warmup && warmup == total) {
        return Ok(hyper.lr_max * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(hyper.lr_min + 0.5 * (hyper.lr_max - hyper.lr_min) * (1.0 + (PI * progress).cos()))
}

/// First and second moments per parameter, plus the number of completed
/// steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T: Scalar = f64> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// AdamW step using the scheduled rate `schedule_lr(state.t)`. Returns the
/// rate applied.
pub fn adamw_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    hyper: &OptimHyper,
) -> Result<f64, OptimError> {
    let lr = schedule_lr(state.t, hyper)?;
    adamw_step_with_lr(params, grads, state, hyper, lr)?;
    Ok(lr)
}

/// AdamW step with an explicit rate `lr` (the `C` of the decay term).
///
/// Validates every gradient before touching anything, so on error neither
/// parameters nor state change.
pub fn adamw_step_with_lr<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    hyper: &OptimHyper,
    lr: f64,
) -> Result<(), OptimError> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient(name.clone()));
        }
    }

    let step = state.t + 1;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let bc1 = T::of(1.0 - hyper.beta1.powf(step as f64));
    let bc2 = T::of(1.0 - hyper.beta2.powf(step as f64));
    let (c, eps) = (T::of(lr), T::of(hyper.eps));
    let decay = T::of(hyper.weight_decay * lr);
    let one = T::one();

    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let decayed = p.ndim() == 2;
        for (((theta, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let old = *theta;
            let mut next = old - c * m_hat / (v_hat.sqrt() + eps);
            if decayed {
                next -= decay * old;
            }
            *theta = next;
        }
    }
    state.t = step;
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_squares().f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
