//! Dynamic span masking for the MLM objective.
//!
//! Masks are assembled from Poisson-length spans until a budget of
//! `round(mask_ratio · seq_len)` positions is covered; overlapping draws
//! merge, so the realized count lands within one span of the budget. Guided
//! masking spends the budget on annotated spans first. Every masked position
//! is then corrupted mask-token / random-token / kept according to the
//! policy's probabilities.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::child_stream;
use crate::TokenId;

/// How masks are drawn and corrupted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskingPolicy {
    /// Fraction of the sequence to mask.
    pub mask_ratio: f64,
    /// Poisson mean of span lengths (each draw is `max(1, Poisson(mean_span))`).
    pub mean_span: f64,
    /// (mask token, random token, keep original) probabilities; must sum to 1.
    pub replace_probs: (f64, f64, f64),
    /// Fraction of sequences routed to guided masking in a mixed batch.
    pub guided_fraction: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_ratio: 0.30,
            mean_span: 3.0,
            replace_probs: (0.8, 0.1, 0.1),
            guided_fraction: 0.0,
        }
    }
}

impl MaskingPolicy {
    /// Evaluation-time masking: 15%, always the mask token.
    pub fn eval() -> Self {
        MaskingPolicy {
            mask_ratio: 0.15,
            mean_span: 3.0,
            replace_probs: (1.0, 0.0, 0.0),
            guided_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.mean_span <= 0.0 {
            return Err(Error::config(format!("mean_span {} must be positive", self.mean_span)));
        }
        let (a, b, c) = self.replace_probs;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "replace_probs {:?} must be non-negative and sum to 1",
                self.replace_probs
            )));
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return Err(Error::config(format!(
                "guided_fraction {} outside [0, 1]",
                self.guided_fraction
            )));
        }
        Ok(())
    }
}

/// What happens to one masked position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    /// Replace with the mask token.
    Mask,
    /// Replace with a uniformly random vocabulary id.
    Random,
    /// Keep the original token (still predicted).
    Keep,
}

/// A complete masking decision for one sequence. `actions` and `labels` are
/// filled by [`apply_corruption`]; `drawn_spans` is the sampler's audit trail
/// of raw `max(1, Poisson)` span-length draws, before overlap merging.
#[derive(Clone, Debug, Default)]
pub struct MaskPlan {
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Per-position corruption action, parallel to `positions`.
    pub actions: Vec<MaskAction>,
    /// Original token ids at the masked positions, parallel to `positions`.
    pub labels: Vec<TokenId>,
    /// Span lengths as drawn by the sampler (empty for purely guided plans).
    pub drawn_spans: Vec<usize>,
}

impl MaskPlan {
    fn from_bitmap(masked: &[bool], drawn_spans: Vec<usize>) -> Self {
        let positions: Vec<usize> = masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        MaskPlan { positions, actions: Vec::new(), labels: Vec::new(), drawn_spans }
    }
}

/// Token ranges (half-open, within one sequence) that guided masking should
/// prioritize. Construction normalizes: sorts, merges overlaps, drops empties.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GuidedSpans {
    ranges: Vec<(usize, usize)>,
}

impl GuidedSpans {
    pub fn new(mut ranges: Vec<(usize, usize)>) -> Self {
        ranges.retain(|&(s, e)| e > s);
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
        for (s, e) in ranges {
            match merged.last_mut() {
                Some((_, le)) if s <= *le => *le = (*le).max(e),
                _ => merged.push((s, e)),
            }
        }
        GuidedSpans { ranges: merged }
    }

    pub fn empty() -> Self {
        GuidedSpans { ranges: Vec::new() }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Spans clipped to `[0, len)`, dropping what falls outside.
    pub fn clipped(&self, len: usize) -> GuidedSpans {
        GuidedSpans {
            ranges: self
                .ranges
                .iter()
                .filter_map(|&(s, e)| {
                    let e = e.min(len);
                    (e > s).then_some((s, e))
                })
                .collect(),
        }
    }

    /// Spans shifted by `offset` (e.g. to account for a leading marker token).
    pub fn shifted(&self, offset: usize) -> GuidedSpans {
        GuidedSpans {
            ranges: self.ranges.iter().map(|&(s, e)| (s + offset, e + offset)).collect(),
        }
    }

    /// Spans intersected with `[lo, hi)` and re-based to start at zero.
    pub fn window(&self, lo: usize, hi: usize) -> GuidedSpans {
        GuidedSpans {
            ranges: self
                .ranges
                .iter()
                .filter_map(|&(s, e)| {
                    let s = s.max(lo);
                    let e = e.min(hi);
                    (e > s).then(|| (s - lo, e - lo))
                })
                .collect(),
        }
    }
}

fn mask_budget(seq_len: usize, mask_ratio: f64) -> usize {
    (mask_ratio * seq_len as f64).round() as usize
}

/// Draws one span length: `max(1, Poisson(mean_span))`.
fn draw_span_len(mean_span: f64, rng: &mut ChaCha8Rng) -> usize {
    let pois = Poisson::new(mean_span).expect("validated mean_span > 0");
    let draw: f64 = pois.sample(rng);
    (draw as usize).max(1)
}

/// Adds spans on top of an existing bitmap until `budget` newly-masked
/// positions are covered; records every drawn length.
fn fill_with_spans(
    masked: &mut [bool],
    budget: usize,
    mean_span: f64,
    rng: &mut ChaCha8Rng,
    drawn: &mut Vec<usize>,
) {
    let seq_len = masked.len();
    if budget == 0 || seq_len == 0 {
        return;
    }
    let mut newly = 0usize;
    let mut stale_draws = 0usize;
    while newly < budget {
        let len = draw_span_len(mean_span, rng);
        drawn.push(len);
        let start = rng.gen_range(0..seq_len);
        let end = (start + len).min(seq_len);
        let mut added = 0usize;
        for m in masked[start..end].iter_mut() {
            if !*m {
                *m = true;
                added += 1;
            }
        }
        newly += added;
        if added == 0 {
            stale_draws += 1;
            // Nearly-full bitmap: place the next span at the first free
            // position instead of rejecting forever.
            if stale_draws > 64 {
                if let Some(first_free) = masked.iter().position(|&m| !m) {
                    let len = draw_span_len(mean_span, rng);
                    drawn.push(len);
                    let end = (first_free + len).min(seq_len);
                    for m in masked[first_free..end].iter_mut() {
                        if !*m {
                            *m = true;
                            newly += 1;
                        }
                    }
                    stale_draws = 0;
                } else {
                    return; // everything masked; budget unreachable
                }
            }
        } else {
            stale_draws = 0;
        }
    }
}

/// Samples a span mask over `[0, seq_len)`: Poisson-length spans at uniform
/// starts, merged on overlap, stopping once `round(mask_ratio · seq_len)`
/// positions are covered (so the final count overshoots by less than one span).
pub fn sample_span_mask(seq_len: usize, policy: &MaskingPolicy, rng: &mut ChaCha8Rng) -> MaskPlan {
    let budget = mask_budget(seq_len, policy.mask_ratio);
    let mut masked = vec![false; seq_len];
    let mut drawn = Vec::new();
    fill_with_spans(&mut masked, budget, policy.mean_span, rng, &mut drawn);
    MaskPlan::from_bitmap(&masked, drawn)
}

/// Guided masking: spends the budget on annotated spans first (whole spans in
/// random order; the span that would overshoot is truncated to a random
/// contiguous sub-run of exactly the remaining budget), then falls back to
/// span sampling for any remainder. With no spans this *is* span sampling.
pub fn guided_mask(
    seq_len: usize,
    spans: &GuidedSpans,
    policy: &MaskingPolicy,
    rng: &mut ChaCha8Rng,
) -> MaskPlan {
    let clipped = spans.clipped(seq_len);
    if clipped.is_empty() {
        return sample_span_mask(seq_len, policy, rng);
    }
    let budget = mask_budget(seq_len, policy.mask_ratio);
    let mut masked = vec![false; seq_len];
    let mut count = 0usize;
    let mut order: Vec<(usize, usize)> = clipped.ranges.clone();
    order.shuffle(rng);
    for (s, e) in order {
        if count >= budget {
            break;
        }
        let remaining = budget - count;
        let span_len = e - s;
        let (lo, hi) = if span_len <= remaining {
            (s, e)
        } else {
            let offset = rng.gen_range(0..=span_len - remaining);
            (s + offset, s + offset + remaining)
        };
        for m in masked[lo..hi].iter_mut() {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }
    let mut drawn = Vec::new();
    if count < budget {
        fill_with_spans(&mut masked, budget - count, policy.mean_span, rng, &mut drawn);
    }
    MaskPlan::from_bitmap(&masked, drawn)
}

/// Applies 80/10/10-style corruption at the plan's positions, filling in the
/// plan's actions and labels, and returns the corrupted sequence. Unmasked
/// positions are untouched.
pub fn apply_corruption(
    tokens: &[TokenId],
    plan: &mut MaskPlan,
    policy: &MaskingPolicy,
    vocab_size: usize,
    mask_token: TokenId,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    if (mask_token as usize) >= vocab_size {
        return Err(Error::config(format!(
            "mask token {mask_token} outside vocab of size {vocab_size}"
        )));
    }
    let (p_mask, p_random, _) = policy.replace_probs;
    let mut out = tokens.to_vec();
    plan.actions.clear();
    plan.labels.clear();
    for &pos in &plan.positions {
        let orig = *tokens.get(pos).ok_or_else(|| {
            Error::data(format!("mask position {pos} outside sequence of length {}", tokens.len()))
        })?;
        let roll: f64 = rng.gen();
        let action = if roll < p_mask {
            out[pos] = mask_token;
            MaskAction::Mask
        } else if roll < p_mask + p_random {
            out[pos] = rng.gen_range(0..vocab_size as TokenId);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        plan.actions.push(action);
        plan.labels.push(orig);
    }
    Ok(out)
}

/// Per-sequence routing decision produced by [`mix_batch`].
#[derive(Clone, Debug)]
pub struct RoutedPlan {
    pub plan: MaskPlan,
    /// True when the sequence was routed to guided masking.
    pub guided: bool,
}

/// Routes each sequence to guided masking with probability
/// `policy.guided_fraction` (span masking otherwise) and samples its plan
/// from an independent per-sequence stream derived from `rng`.
pub fn mix_batch(
    seqs: &[(usize, &GuidedSpans)],
    policy: &MaskingPolicy,
    rng: &mut ChaCha8Rng,
) -> Vec<RoutedPlan> {
    seqs.iter()
        .map(|&(seq_len, spans)| {
            let route: f64 = rng.gen();
            let guided = route < policy.guided_fraction;
            let mut seq_rng = child_stream(rng);
            let plan = if guided {
                guided_mask(seq_len, spans, policy, &mut seq_rng)
            } else {
                sample_span_mask(seq_len, policy, &mut seq_rng)
            };
            RoutedPlan { plan, guided }
        })
        .collect()
}
