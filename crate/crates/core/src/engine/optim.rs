use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{is_encoder_param, ModelParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub ema_alpha: f64,
    pub warmup_iters: u64,
    /// Learning rate at iteration 0 as a fraction of the base rate.
    pub warmup_ratio: f64,
    pub poly_power: f64,
    pub total_iters: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_encoder: 6e-5,
            lr_decoder: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            batch_size: 2,
            ema_alpha: 0.999,
            warmup_iters: 1500,
            warmup_ratio: 1e-6,
            poly_power: 1.0,
            total_iters: 2000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0) {
            return Err(Error::Config("schedule learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("schedule.ema_alpha must lie in [0, 1), got {}", self.ema_alpha)));
        }
        if self.warmup_iters > self.total_iters {
            return Err(Error::Config(format!(
                "schedule.warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("schedule betas must lie in [0, 1) and eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.warmup_ratio > 0.0 && self.warmup_ratio <= 1.0 && self.poly_power >= 0.0)
        {
            return Err(Error::Config("schedule weight_decay/warmup_ratio/poly_power out of range".into()));
        }
        Ok(())
    }
}

/// Multiplier on the base rates at `iteration`: linear warmup from
/// `warmup_ratio` to 1, then polynomial decay to 0 at `total_iters`.
pub fn lr_factor(iteration: u64, s: &ScheduleConfig) -> Result<f64> {
    if iteration > s.total_iters {
        return Err(Error::invalid(format!("iteration {iteration} beyond total {}", s.total_iters)));
    }
    if iteration < s.warmup_iters {
        let t = iteration as f64 / s.warmup_iters as f64;
        return Ok(s.warmup_ratio + (1.0 - s.warmup_ratio) * t);
    }
    if s.total_iters == s.warmup_iters {
        return Ok(1.0);
    }
    let progress = (iteration - s.warmup_iters) as f64 / (s.total_iters - s.warmup_iters) as f64;
    Ok((1.0 - progress).powf(s.poly_power))
}

/// `(lr_encoder, lr_decoder)` at `iteration`.
pub fn lr_at(iteration: u64, s: &ScheduleConfig) -> Result<(f64, f64)> {
    let f = lr_factor(iteration, s)?;
    Ok((s.lr_encoder * f, s.lr_decoder * f))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl From<&ScheduleConfig> for AdamWParams {
    fn from(s: &ScheduleConfig) -> Self {
        AdamWParams { beta1: s.beta1, beta2: s.beta2, weight_decay: s.weight_decay, eps: s.eps }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(params: &ModelParams<T>) -> Self {
        let z: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape()))).collect();
        AdamState { m: z.clone(), v: z, steps: 0 }
    }
}

/// One decoupled-weight-decay Adam update. Parameters missing from `grads`
/// are left untouched. `lr_of(name)` gives each parameter's step size.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr_of: impl Fn(&str) -> f64,
    hp: &AdamWParams,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::invalid(format!("adamw: no moments for {name}")));
        };
        let lr = lr_of(name);
        let decay = T::of(1.0 - lr * hp.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(hp.eps);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            *w = *w * decay - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-parameter rate: encoder parameters get `lr_enc`, the rest `lr_dec`.
pub fn group_lr(lr_enc: f64, lr_dec: f64) -> impl Fn(&str) -> f64 {
    move |name| if is_encoder_param(name) { lr_enc } else { lr_dec }
}

/// `θ_T ← α·θ_T + (1−α)·θ_S`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, alpha: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig { warmup_iters: 10, total_iters: 20, ..ScheduleConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        let (e0, d0) = lr_at(0, &s).unwrap();
        assert!((e0 - 6e-5 * 1e-6).abs() < 1e-20 && (d0 - 6e-4 * 1e-6).abs() < 1e-20);
        assert_eq!(lr_at(10, &s).unwrap(), (6e-5, 6e-4));
        assert_eq!(lr_at(20, &s).unwrap(), (0.0, 0.0));
        assert!(lr_at(21, &s).is_err());
        assert!((lr_at(15, &s).unwrap().1 - 3e-4).abs() < 1e-18);
    }
}
