//! Masked-token recovery: corrupt held-out documents with the deterministic
//! evaluation policy, ask a model for logits at the masked positions, and
//! report top-k accuracy per block size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::PackedBatch;
use crate::error::{Error, Result};
use crate::masking::{apply_corruption, sample_span_mask, MaskingPolicy};
use crate::rng::stream;
use crate::{Model32, TokenId};

/// One (block size, k) accuracy cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub block_size: usize,
    pub k: usize,
    pub accuracy: f64,
    pub masked_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    /// Documents skipped because they tokenized to nothing.
    pub skipped_docs: usize,
}

impl RecoveryReport {
    pub fn accuracy(&self, block_size: usize, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.block_size == block_size && r.k == k)
            .map(|r| r.accuracy)
    }
}

/// Rank of the original token in a logits row under a stable descending sort
/// (ties broken toward smaller token ids).
fn rank_of(logits: &[f32], token: TokenId) -> usize {
    let target = logits[token as usize];
    let mut rank = 0;
    for (v_id, &v) in logits.iter().enumerate() {
        if v > target || (v == target && (v_id as TokenId) < token) {
            rank += 1;
        }
    }
    rank
}

/// Core recovery loop over any logit source. Each document is truncated to
/// `block_size`, masked at 15% with spans, corrupted by pure mask-token
/// replacement, and scored; `predict` maps (corrupted tokens, masked
/// positions) to one logits row per masked position. Hit counting pools over
/// documents with order-independent integer counters.
pub fn topk_recovery<F>(
    predict: F,
    vocab_size: usize,
    mask_token: TokenId,
    docs: &[Vec<TokenId>],
    block_size: usize,
    ks: &[usize],
    seed: u64,
) -> Result<RecoveryReport>
where
    F: Fn(&[TokenId], &[usize]) -> Result<Vec<Vec<f32>>> + Sync,
{
    if block_size == 0 {
        return Err(Error::config("block_size must be positive"));
    }
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::config("top-k list must be non-empty with positive k"));
    }
    let policy = MaskingPolicy::eval();
    let per_doc: Vec<(Vec<usize>, usize, usize)> = docs
        .par_iter()
        .enumerate()
        .map(|(d, doc)| -> Result<(Vec<usize>, usize, usize)> {
            if doc.is_empty() {
                return Ok((vec![0; ks.len()], 0, 1));
            }
            let tokens = &doc[..doc.len().min(block_size)];
            let mut rng = stream(seed, "eval-mask", &[d as u64]);
            let mut plan = sample_span_mask(tokens.len(), &policy, &mut rng);
            let corrupted =
                apply_corruption(tokens, &mut plan, &policy, vocab_size, mask_token, &mut rng)?;
            if plan.positions.is_empty() {
                return Ok((vec![0; ks.len()], 0, 0));
            }
            let logits = predict(&corrupted, &plan.positions)?;
            if logits.len() != plan.positions.len() {
                return Err(Error::numeric(format!(
                    "predictor returned {} rows for {} masked positions",
                    logits.len(),
                    plan.positions.len()
                )));
            }
            let mut hits = vec![0usize; ks.len()];
            for (row, &label) in logits.iter().zip(&plan.labels) {
                if row.len() != vocab_size {
                    return Err(Error::numeric(format!(
                        "logits row has {} entries for vocab {vocab_size}",
                        row.len()
                    )));
                }
                let rank = rank_of(row, label);
                for (h, &k) in hits.iter_mut().zip(ks) {
                    if rank < k {
                        *h += 1;
                    }
                }
            }
            Ok((hits, plan.positions.len(), 0))
        })
        .collect::<Result<_>>()?;

    let mut hits = vec![0usize; ks.len()];
    let mut total = 0usize;
    let mut skipped = 0usize;
    for (h, n, s) in per_doc {
        for (acc, hi) in hits.iter_mut().zip(h) {
            *acc += hi;
        }
        total += n;
        skipped += s;
    }
    let rows = ks
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| RecoveryRow {
            block_size,
            k,
            accuracy: if total == 0 { 0.0 } else { h as f64 / total as f64 },
            masked_positions: total,
        })
        .collect();
    Ok(RecoveryReport { rows, skipped_docs: skipped })
}

/// Recovery for an encoder checkpoint: documents are framed the way training
/// frames chunks — `[cls] tokens [sep]` — so masked-position queries shift by
/// one. Needs `max_seq_len ≥ block_size + 2`.
pub fn model_recovery(
    model: &Model32,
    cls: TokenId,
    sep: TokenId,
    mask_token: TokenId,
    docs: &[Vec<TokenId>],
    block_size: usize,
    ks: &[usize],
    seed: u64,
) -> Result<RecoveryReport> {
    if model.config.max_seq_len < block_size + 2 {
        return Err(Error::config(format!(
            "model context {} cannot frame blocks of {block_size} plus boundary tokens",
            model.config.max_seq_len
        )));
    }
    let vocab = model.config.vocab_size;
    topk_recovery(
        |corrupted, positions| {
            let mut framed = Vec::with_capacity(corrupted.len() + 2);
            framed.push(cls);
            framed.extend_from_slice(corrupted);
            framed.push(sep);
            let batch = PackedBatch::single(&framed)?;
            let shifted: Vec<usize> = positions.iter().map(|p| p + 1).collect();
            let logits = model.mlm_logits(&batch, &shifted)?;
            let (rows, cols) = (positions.len(), vocab);
            Ok((0..rows).map(|r| logits.data()[r * cols..(r + 1) * cols].to_vec()).collect())
        },
        vocab,
        mask_token,
        docs,
        block_size,
        ks,
        seed,
    )
}
