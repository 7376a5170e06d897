use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn fresh(p: &ParamSet<T>) -> Self {
        Self { m: p.zeros_like(), v: p.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update, in place. Tensors for which `update`
/// returns false are left untouched (their moments too).
pub fn adam_step<T: Real>(
    p: &mut ParamSet<T>,
    g: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    update: impl Fn(&Tensor<T>) -> bool,
) -> Result<()> {
    p.check_congruent(g)?;
    p.check_congruent(&state.m)?;
    if let Some(name) = g.first_non_finite() {
        return Err(Error::Numeric { tensor: name.to_string() });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(lr);
    let eps = T::lit(cfg.eps);
    for (((pt, gt), mt), vt) in p.tensors.iter_mut().zip(&g.tensors).zip(state.m.tensors.iter_mut()).zip(state.v.tensors.iter_mut()) {
        if !update(pt) {
            continue;
        }
        for i in 0..pt.data.len() {
            let gi = gt.data[i];
            mt.data[i] = b1 * mt.data[i] + (T::one() - b1) * gi;
            vt.data[i] = b2 * vt.data[i] + (T::one() - b2) * gi * gi;
            let m_hat = mt.data[i] / bc1;
            let v_hat = vt.data[i] / bc2;
            pt.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay, evaluated per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
