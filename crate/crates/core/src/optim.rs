//! Adam with the inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{AptError, Result};
use crate::params::ParamStore;

/// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`; `scale` is 1
/// in the plain schedule.
pub fn lr_at(step: usize, d_model: usize, warmup_steps: usize) -> Result<f64> {
    if step == 0 {
        return Err(AptError::Config("learning-rate schedule starts at step 1".into()));
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(AptError::Config("warmup steps and d_model must be positive".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Multiplier on the schedule.
    pub lr_scale: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9, warmup_steps: 400, lr_scale: 1.0, clip_norm: Some(5.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub applied: bool,
    pub lr: f64,
    pub grad_norm: f64,
}

/// First and second moments per parameter, aligned with store ids.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    pub skipped: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        OptimizerState { config, m: zeros.clone(), v: zeros, step: 0, skipped: 0 }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Clips, then applies one update at the scheduled rate. A non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, d_model: usize) -> Result<StepReport> {
        let lr = self.config.lr_scale * lr_at(self.step + 1, d_model, self.config.warmup_steps)?;
        self.step_with_lr(store, grads, lr)
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &mut Gradients, lr: f64) -> Result<StepReport> {
        let grad_norm = grads.global_norm();
        if !grads.all_finite() || !grad_norm.is_finite() {
            self.skipped += 1;
            return Ok(StepReport { applied: false, lr, grad_norm });
        }
        if let Some(clip) = self.config.clip_norm {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(store, id) else { continue };
            let g = g.data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let value = store.value_mut(id);
            let dtype = value.dtype();
            for (((p, gi), mi), vi) in value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *p = dtype.round(*p - update);
            }
        }
        Ok(StepReport { applied: true, lr, grad_norm })
    }
}
