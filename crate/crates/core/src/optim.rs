//! Optimizer and schedules: AdamW with per-tensor update-RMS clipping, a
//! warmup–stable–decay learning-rate curve with a `1 − √τ` tail, and stepwise
//! batch-size warmup.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::scalar::Scalar;

/// Optimizer hyperparameters. Decay is decoupled (applied to the raw
/// parameter, not the adaptive update).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerHyper {
    pub peak_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip threshold `d`: per-tensor updates are rescaled so RMS ≤ d.
    pub clip_threshold: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            peak_lr: 8e-4,
            betas: (0.9, 0.98),
            eps: 1e-6,
            weight_decay: 0.0,
            clip_threshold: 1.0,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if self.eps <= 0.0 {
            return Err(Error::config(format!("eps {} must be positive", self.eps)));
        }
        if self.peak_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("negative learning rate or weight decay".to_string()));
        }
        if self.clip_threshold <= 0.0 {
            return Err(Error::config(format!(
                "clip_threshold {} must be positive",
                self.clip_threshold
            )));
        }
        Ok(())
    }
}

/// First/second-moment accumulators per named parameter, plus the step count.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<S: Scalar> {
    pub m: IndexMap<String, Vec<S>>,
    pub v: IndexMap<String, Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        OptimizerState { m: IndexMap::new(), v: IndexMap::new(), step: 0 }
    }
}

/// Per-step diagnostics from [`stable_adamw_step`].
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    /// Largest RMS over parameter tensors of the applied adaptive update
    /// (excluding weight decay); bounded by `lr · clip_threshold`.
    pub max_update_rms: f64,
}

/// One AdamW step with Adafactor-style update clipping.
///
/// Per parameter tensor: bias-corrected moments give `u = m̂ / (√v̂ + eps)`;
/// the tensor-wide factor `η = 1 / max(1, RMS(u)/d)` rescales `u` so its RMS
/// never exceeds `d`; then `θ ← θ − lr·η·u − lr·weight_decay·θ`.
pub fn stable_adamw_step<S: Scalar>(
    params: &mut IndexMap<String, Tensor<S>>,
    grads: &IndexMap<String, Vec<S>>,
    state: &mut OptimizerState<S>,
    hyper: &OptimizerHyper,
    lr_t: f64,
) -> Result<StepStats> {
    let (b1, b2) = hyper.betas;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let b1s = S::from_f64_lossy(b1);
    let b2s = S::from_f64_lossy(b2);
    let one_m_b1 = S::from_f64_lossy(1.0 - b1);
    let one_m_b2 = S::from_f64_lossy(1.0 - b2);
    let inv_bc1 = S::from_f64_lossy(1.0 / bc1);
    let inv_bc2 = S::from_f64_lossy(1.0 / bc2);
    let eps = S::from_f64_lossy(hyper.eps);
    let wd_factor = S::from_f64_lossy(lr_t * hyper.weight_decay);
    let mut stats = StepStats::default();

    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("no gradient provided for parameter `{name}`")))?;
        if g.len() != p.numel() {
            return Err(Error::config(format!(
                "gradient length {} does not match parameter `{name}` of {} elements",
                g.len(),
                p.numel()
            )));
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient for parameter `{name}` at element {bad}"
            )));
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);

        // Moments and unclipped update; RMS accumulated in f64.
        let mut sum_sq = 0.0f64;
        let mut u = vec![S::zero(); n];
        for i in 0..n {
            m[i] = b1s * m[i] + one_m_b1 * g[i];
            v[i] = b2s * v[i] + one_m_b2 * g[i] * g[i];
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            let ui = m_hat / (v_hat.sqrt() + eps);
            u[i] = ui;
            let uf = ui.to_f64_lossy();
            sum_sq += uf * uf;
        }
        let rms = (sum_sq / n as f64).sqrt();
        let eta = 1.0 / (rms / hyper.clip_threshold).max(1.0);
        let step_scale = S::from_f64_lossy(lr_t * eta);
        let data = p.data_mut();
        for i in 0..n {
            data[i] = data[i] - step_scale * u[i] - wd_factor * data[i];
        }
        let applied_rms = lr_t * eta * rms;
        if applied_rms > stats.max_update_rms {
            stats.max_update_rms = applied_rms;
        }
    }
    Ok(stats)
}

/// Warmup–stable–decay learning-rate plan plus the batch-size warmup ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub decay_steps: u64,
    pub peak_lr: f64,
    /// `(from_step, batch_size)` thresholds, ascending; the first entry's size
    /// applies from step 0 even if its threshold is later.
    pub batch_warmup: Vec<(u64, usize)>,
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.batch_warmup.is_empty() {
            return Err(Error::config("batch_warmup must name at least one batch size".to_string()));
        }
        for w in self.batch_warmup.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::config("batch_warmup thresholds must be ascending".to_string()));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::config("batch_warmup sizes must be non-decreasing".to_string()));
            }
        }
        if self.batch_warmup.iter().any(|&(_, b)| b == 0) {
            return Err(Error::config("batch sizes must be positive".to_string()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.stable_steps + self.decay_steps
    }
}

/// Learning rate at `step`: linear 0→peak over the warmup, constant at peak
/// through the stable phase, then `peak · (1 − √τ)` over the decay, and 0
/// after the end.
pub fn wsd_lr(step: u64, plan: &SchedulePlan) -> f64 {
    if step < plan.warmup_steps {
        return plan.peak_lr * step as f64 / plan.warmup_steps as f64;
    }
    let after_warmup = step - plan.warmup_steps;
    if after_warmup < plan.stable_steps {
        return plan.peak_lr;
    }
    let into_decay = after_warmup - plan.stable_steps;
    if into_decay < plan.decay_steps {
        let tau = into_decay as f64 / plan.decay_steps as f64;
        return plan.peak_lr * (1.0 - tau.sqrt());
    }
    0.0
}

/// Batch size at `step`: the largest threshold entry not exceeding `step`;
/// before the first threshold, the first entry's size.
pub fn batch_size_at(step: u64, plan: &SchedulePlan) -> usize {
    let mut size = plan.batch_warmup[0].1;
    for &(from, b) in &plan.batch_warmup {
        if step >= from {
            size = b;
        }
    }
    size
}
