//! Rotary frequencies, sequence packing, and attention layout masks.

use crate::error::{Error, Result};
use crate::kernels::AttentionLayout;
use crate::TokenId;

use super::config::EncoderConfig;

/// Per-pair inverse frequencies for rotary positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeFreqs {
    /// `inv_freq[i] = base'^(−2i/head_dim)` for pair `i`; `inv_freq[0] = 1`.
    pub inv_freq: Vec<f64>,
    /// Configured base before rescaling.
    pub base: f64,
    /// Base after context-extension rescaling.
    pub effective_base: f64,
    pub head_dim: usize,
}

/// Computes rotary frequencies with context-extension rescaling: the base is
/// first rescaled to `base · ntk_scale^(head_dim / (head_dim − 2))`, which
/// stretches long-wavelength pairs when the context window grows.
pub fn rope_freqs(head_dim: usize, base: f64, ntk_scale: f64) -> Result<RopeFreqs> {
    if head_dim < 4 || head_dim % 2 != 0 {
        return Err(Error::config(format!(
            "rope_freqs: head_dim {head_dim} must be an even number ≥ 4"
        )));
    }
    if base <= 1.0 {
        return Err(Error::config(format!("rope_freqs: base {base} must exceed 1")));
    }
    if ntk_scale <= 0.0 {
        return Err(Error::config(format!("rope_freqs: ntk_scale {ntk_scale} must be positive")));
    }
    let d = head_dim as f64;
    let effective_base = base * ntk_scale.powf(d / (d - 2.0));
    let inv_freq = (0..head_dim / 2)
        .map(|i| effective_base.powf(-2.0 * i as f64 / d))
        .collect();
    Ok(RopeFreqs { inv_freq, base, effective_base, head_dim })
}

/// Several sequences concatenated into one flat token batch. Attention never
/// crosses the recorded boundaries, and positions restart at each boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    tokens: Vec<TokenId>,
    /// Cumulative starts: `[0, len₀, len₀+len₁, …, total]`.
    boundaries: Vec<usize>,
    /// Constant added to every rotary position (used by shift tests).
    pub position_offset: usize,
}

impl PackedBatch {
    pub fn pack(seqs: &[&[TokenId]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::data("pack: no sequences".to_string()));
        }
        let mut tokens = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
        let mut boundaries = Vec::with_capacity(seqs.len() + 1);
        boundaries.push(0);
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::data(format!("pack: sequence {i} is empty")));
            }
            tokens.extend_from_slice(seq);
            boundaries.push(tokens.len());
        }
        Ok(PackedBatch { tokens, boundaries, position_offset: 0 })
    }

    pub fn single(seq: &[TokenId]) -> Result<Self> {
        Self::pack(&[seq])
    }

    pub fn with_position_offset(mut self, offset: usize) -> Self {
        self.position_offset = offset;
        self
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_seqs(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Flat-index range `[start, end)` of sequence `i`.
    pub fn seq_range(&self, i: usize) -> (usize, usize) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Index of the sequence containing flat token index `t`.
    pub fn seq_of(&self, t: usize) -> usize {
        match self.boundaries.binary_search(&t) {
            Ok(b) => b.min(self.num_seqs() - 1),
            Err(ins) => ins - 1,
        }
    }

    /// Rotary position of every token: within-sequence index plus the offset.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tokens.len());
        for s in 0..self.num_seqs() {
            let (lo, hi) = self.seq_range(s);
            out.extend((0..hi - lo).map(|p| p + self.position_offset));
        }
        out
    }

    /// Longest sequence in the pack.
    pub fn max_seq_len(&self) -> usize {
        (0..self.num_seqs())
            .map(|i| {
                let (lo, hi) = self.seq_range(i);
                hi - lo
            })
            .max()
            .unwrap_or(0)
    }
}

/// Attention layout for one layer of a packed batch: tokens attend only
/// within their own sequence, and on local layers only within `window`
/// relative distance. Layer `l` (0-based) is global iff
/// `(l + 1) % global_every == 0`.
pub fn attention_layout(
    batch: &PackedBatch,
    layer_index: usize,
    config: &EncoderConfig,
) -> AttentionLayout {
    let global = (layer_index + 1) % config.global_every == 0;
    layout_for(batch, global, config.window)
}

/// Layout with an explicit global/local choice (the per-layer rule lives in
/// [`attention_layout`]).
pub fn layout_for(batch: &PackedBatch, global: bool, window: usize) -> AttentionLayout {
    let n = batch.total_tokens();
    let mut seq_id = vec![0usize; n];
    for s in 0..batch.num_seqs() {
        let (lo, hi) = batch.seq_range(s);
        for t in seq_id.iter_mut().take(hi).skip(lo) {
            *t = s;
        }
    }
    AttentionLayout::new_with(n, |i, j| {
        seq_id[i] == seq_id[j] && (global || i.abs_diff(j) <= window)
    })
}
