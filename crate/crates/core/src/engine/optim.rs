//! AdamW with decoupled weight decay and global-norm gradient clipping,
//! plus the warmup/cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{EngineError, Scalar, Tensor};

/// Hyperparameters of the AdamW update (everything except the learning rate,
/// which comes from the schedule each step).
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: 1.0,
        }
    }
}

/// First/second moment accumulators plus the step counter. Moment tensors
/// always match their parameter shapes.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(param_shapes: &[Vec<usize>]) -> Self {
        OptimizerState {
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// Euclidean norm over all present gradients.
pub fn global_grad_norm<F: Scalar>(grads: &[Option<Tensor<F>>]) -> f64 {
    let mut acc = 0f64;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            let v = v.as_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// One AdamW step over a parameter list.
///
/// The global gradient norm is clipped to `cfg.clip_norm` first, weight decay
/// is decoupled (parameters scaled by `1 - lr * wd` before the Adam term),
/// and parameters whose gradient slot is `None` are left untouched (their
/// moments do not advance). `lrs` gives the per-parameter learning rate so
/// that parameter groups with different rates share one clipped step.
pub fn adamw_step<F: Scalar>(
    params: &mut [(&str, &mut Tensor<F>)],
    grads: &[Option<Tensor<F>>],
    state: &mut OptimizerState<F>,
    cfg: &AdamWConfig,
    lrs: &[f64],
) -> Result<(), EngineError> {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), lrs.len(), "params/lrs length mismatch");
    assert_eq!(params.len(), state.m.len(), "params/state length mismatch");
    for ((name, _), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(EngineError::NonFiniteGrad {
                    name: (*name).to_string(),
                });
            }
        }
    }
    let norm = global_grad_norm(grads);
    let scale = if norm > cfg.clip_norm && norm > 0.0 {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::c(cfg.beta1), F::c(cfg.beta2));
    let (ob1, ob2) = (F::c(1.0 - cfg.beta1), F::c(1.0 - cfg.beta2));
    let feps = F::c(cfg.eps);
    let fscale = F::c(scale);
    for (idx, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let lr = lrs[idx];
        let decay = F::c(1.0 - lr * cfg.weight_decay);
        let flr = F::c(lr);
        let fbc1 = F::c(bc1);
        let fbc2 = F::c(bc2);
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g.data()[j] * fscale;
            m[j] = b1 * m[j] + ob1 * gv;
            v[j] = b2 * v[j] + ob2 * gv * gv;
            let m_hat = m[j] / fbc1;
            let v_hat = v[j] / fbc2;
            *pv = *pv * decay - flr * m_hat / (v_hat.sqrt() + feps);
        }
    }
    Ok(())
}

/// Learning-rate schedule: linear ramp 0 -> peak over `warmup_steps`, then
/// cosine decay peak -> min over the remaining steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(
        peak_lr: f64,
        min_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Result<Self, EngineError> {
        if !(peak_lr > 0.0 && min_lr > 0.0 && min_lr <= peak_lr) {
            return Err(EngineError::Invalid {
                what: format!("lr schedule requires 0 < min_lr <= peak_lr, got {min_lr} / {peak_lr}"),
            });
        }
        if warmup_steps >= total_steps {
            return Err(EngineError::Invalid {
                what: format!(
                    "lr schedule requires warmup_steps < total_steps, got {warmup_steps} / {total_steps}"
                ),
            });
        }
        Ok(LrSchedule {
            peak_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }
}

/// Learning rate at `step` under the warmup + cosine schedule.
pub fn cosine_lr(step: u64, schedule: &LrSchedule) -> f64 {
    if step <= schedule.warmup_steps {
        if schedule.warmup_steps == 0 {
            return schedule.peak_lr;
        }
        return schedule.peak_lr * step as f64 / schedule.warmup_steps as f64;
    }
    let span = (schedule.total_steps - schedule.warmup_steps) as f64;
    let progress = ((step - schedule.warmup_steps) as f64 / span).min(1.0);
    schedule.min_lr
        + 0.5 * (schedule.peak_lr - schedule.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
