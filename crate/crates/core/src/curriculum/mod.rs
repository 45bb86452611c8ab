//! Three-phase training driver: general pre-training, context extension with
//! rescaled rotary frequencies, and annealed domain specialization — plus the
//! checkpointed hand-off between phases.

mod trainer;

pub use trainer::{
    RunState, SourceCursor, StepRecord, TrainSource, Trainer, TrainerConfig, METRICS_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::SchedulePlan;
use crate::Model32;

/// The three phases, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Pretrain,
    Extend,
    Anneal,
}

impl PhaseKind {
    pub fn order(self) -> usize {
        match self {
            PhaseKind::Pretrain => 0,
            PhaseKind::Extend => 1,
            PhaseKind::Anneal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Pretrain => "pretrain",
            PhaseKind::Extend => "extend",
            PhaseKind::Anneal => "anneal",
        }
    }
}

fn default_rope_base() -> f64 {
    10_000.0
}

/// One curriculum phase: data mixture, masking policy, context length, and
/// learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: PhaseKind,
    pub token_budget: u64,
    pub seq_len: usize,
    pub mask_ratio: f64,
    pub mean_span: f64,
    #[serde(default)]
    pub guided_fraction: f64,
    pub mixture_start: Vec<f64>,
    pub mixture_end: Vec<f64>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Rotary rescale applied when entering this phase; 0 (the default) means
    /// "derive from the sequence-length ratio", which `plan_phases` fills in.
    #[serde(default)]
    pub ntk_scale: f64,
    pub schedule: SchedulePlan,
}

fn check_mixture(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::config(format!("phase `{name}`: empty mixture vector")));
    }
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::config(format!("phase `{name}`: mixture weights must be non-negative")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "phase `{name}`: mixture sums to {sum}, expected 1 within 1e-9"
        )));
    }
    Ok(())
}

impl PhaseSpec {
    pub fn validate(&self) -> Result<()> {
        let name = self.name.name();
        if self.token_budget == 0 {
            return Err(Error::config(format!("phase `{name}`: token_budget must be positive")));
        }
        if self.seq_len < 4 {
            return Err(Error::config(format!("phase `{name}`: seq_len must be at least 4")));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("phase `{name}`: mask_ratio must lie in [0, 1]")));
        }
        if self.mean_span <= 0.0 {
            return Err(Error::config(format!("phase `{name}`: mean_span must be positive")));
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return Err(Error::config(format!("phase `{name}`: guided_fraction must lie in [0, 1]")));
        }
        check_mixture(name, &self.mixture_start)?;
        check_mixture(name, &self.mixture_end)?;
        if self.mixture_start.len() != self.mixture_end.len() {
            return Err(Error::config(format!(
                "phase `{name}`: mixture_start and mixture_end differ in length"
            )));
        }
        if self.rope_base <= 1.0 {
            return Err(Error::config(format!("phase `{name}`: rope_base must exceed 1")));
        }
        if self.ntk_scale < 0.0 {
            return Err(Error::config(format!("phase `{name}`: ntk_scale must not be negative")));
        }
        self.schedule.validate()
    }
}

/// Validates an ordered phase list and fills in derived rotary rescales
/// (`ntk_scale = seq_len / previous seq_len` where left at the 0 default).
pub fn plan_phases(mut phases: Vec<PhaseSpec>) -> Result<Vec<PhaseSpec>> {
    if phases.is_empty() || phases.len() > 3 {
        return Err(Error::config(format!("expected 1 to 3 phases, got {}", phases.len())));
    }
    for p in &phases {
        p.validate()?;
    }
    for w in phases.windows(2) {
        if w[1].name.order() <= w[0].name.order() {
            return Err(Error::config(format!(
                "phases must follow pretrain → extend → anneal, got `{}` after `{}`",
                w[1].name.name(),
                w[0].name.name()
            )));
        }
        if w[1].seq_len < w[0].seq_len {
            return Err(Error::config(format!(
                "phase `{}` shrinks seq_len from {} to {}; contexts may only grow",
                w[1].name.name(),
                w[0].seq_len,
                w[1].seq_len
            )));
        }
        if w[1].mixture_start.len() != w[0].mixture_start.len() {
            return Err(Error::config("mixture dimension differs across phases"));
        }
    }
    let mut prev_len = phases[0].seq_len;
    for p in phases.iter_mut() {
        if p.ntk_scale == 0.0 {
            p.ntk_scale = p.seq_len as f64 / prev_len as f64;
        }
        prev_len = p.seq_len;
    }
    Ok(phases)
}

/// The stock desk-scale plan: token budgets 1.7M / 0.25M / 0.35M mirror the
/// full-scale 1700:250:350 split; the extension phase quadruples the context.
pub fn default_desk_plan(num_sources: usize, base_seq: usize, batch_size: usize) -> Result<Vec<PhaseSpec>> {
    if num_sources == 0 || base_seq < 4 || batch_size == 0 {
        return Err(Error::config("desk plan needs sources, a base seq_len ≥ 4, and a batch size"));
    }
    let uniform = vec![1.0 / num_sources as f64; num_sources];
    let schedule = |budget: u64, seq: usize, peak: f64, warmup_frac: f64, decay_frac: f64| {
        let steps = (budget / (batch_size as u64 * seq as u64)).max(10);
        let warmup = ((steps as f64 * warmup_frac) as u64).max(if warmup_frac > 0.0 { 1 } else { 0 });
        let decay = ((steps as f64 * decay_frac) as u64).max(1);
        let stable = steps.saturating_sub(warmup + decay);
        SchedulePlan {
            warmup_steps: warmup,
            stable_steps: stable,
            decay_steps: decay,
            peak_lr: peak,
            batch_warmup: vec![(0, batch_size)],
        }
    };
    let plan = vec![
        PhaseSpec {
            name: PhaseKind::Pretrain,
            token_budget: 1_700_000,
            seq_len: base_seq,
            mask_ratio: 0.30,
            mean_span: 3.0,
            guided_fraction: 0.2,
            mixture_start: uniform.clone(),
            mixture_end: uniform.clone(),
            rope_base: default_rope_base(),
            ntk_scale: 0.0,
            schedule: schedule(1_700_000, base_seq, 3e-3, 0.02, 0.1),
        },
        PhaseSpec {
            name: PhaseKind::Extend,
            token_budget: 250_000,
            seq_len: base_seq * 4,
            mask_ratio: 0.30,
            mean_span: 3.0,
            guided_fraction: 0.2,
            mixture_start: uniform.clone(),
            mixture_end: uniform.clone(),
            rope_base: default_rope_base(),
            ntk_scale: 0.0,
            schedule: schedule(250_000, base_seq * 4, 1e-3, 0.01, 0.2),
        },
        PhaseSpec {
            name: PhaseKind::Anneal,
            token_budget: 350_000,
            seq_len: base_seq * 4,
            mask_ratio: 0.15,
            mean_span: 3.0,
            guided_fraction: 0.3,
            mixture_start: uniform.clone(),
            mixture_end: uniform,
            rope_base: default_rope_base(),
            ntk_scale: 0.0,
            schedule: schedule(350_000, base_seq * 4, 8e-4, 0.0, 1.0),
        },
    ];
    plan_phases(plan)
}

/// Linear mixture interpolation in consumed tokens, renormalized against
/// floating-point drift.
pub fn anneal_mixture(tokens_done: u64, phase: &PhaseSpec) -> Vec<f64> {
    let t = (tokens_done as f64 / phase.token_budget as f64).clamp(0.0, 1.0);
    let mut w: Vec<f64> = phase
        .mixture_start
        .iter()
        .zip(&phase.mixture_end)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let sum: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= sum;
    }
    w
}

/// Phase hand-off: parameters carry over untouched; the context limit is
/// raised and the rotary rescale is multiplied in (one shared base for local
/// and global layers, since the model holds a single frequency ladder).
pub fn transition(model: &mut Model32, from: &PhaseSpec, to: &PhaseSpec) -> Result<()> {
    if to.seq_len < from.seq_len {
        return Err(Error::config(format!(
            "cannot shrink seq_len from {} to {} at a phase boundary",
            from.seq_len, to.seq_len
        )));
    }
    let scale = if to.ntk_scale > 0.0 {
        to.ntk_scale
    } else {
        to.seq_len as f64 / from.seq_len as f64
    };
    model.config.max_seq_len = to.seq_len;
    model.config.rope_base = to.rope_base;
    model.config.ntk_scale *= scale;
    crate::encoder::rope_freqs(model.config.head_dim(), model.config.rope_base, model.config.ntk_scale)?;
    Ok(())
}
