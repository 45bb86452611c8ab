//! Graded query/product similarity: the four-level label score map,
//! mean-pooled unit embeddings, and CoSENT fine-tuning with a Spearman-scored
//! held-out split.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::BpeVocab;
use crate::encoder::{Mode, PackedBatch};
use crate::error::{Error, Result};
use crate::kernels::{NodeId, Tape};
use crate::optim::{stable_adamw_step, OptimizerHyper, OptimizerState};
use crate::rng::{fnv1a64, stream};
use crate::{Model32, TokenId};

use super::stats::spearman;

/// Four-level relevance grade between a query and a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EsciLabel {
    Exact,
    Substitute,
    Complement,
    Irrelevant,
}

impl FromStr for EsciLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" | "e" => Ok(EsciLabel::Exact),
            "substitute" | "s" => Ok(EsciLabel::Substitute),
            "complement" | "c" => Ok(EsciLabel::Complement),
            "irrelevant" | "i" => Ok(EsciLabel::Irrelevant),
            other => Err(Error::data(format!("unknown relevance label `{other}`"))),
        }
    }
}

impl fmt::Display for EsciLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EsciLabel::Exact => "Exact",
            EsciLabel::Substitute => "Substitute",
            EsciLabel::Complement => "Complement",
            EsciLabel::Irrelevant => "Irrelevant",
        };
        f.write_str(s)
    }
}

impl Serialize for EsciLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EsciLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The fixed label → target-score map.
pub fn esci_score_map(label: EsciLabel) -> f64 {
    match label {
        EsciLabel::Exact => 1.0,
        EsciLabel::Substitute => 0.66,
        EsciLabel::Complement => 0.33,
        EsciLabel::Irrelevant => 0.0,
    }
}

/// One graded evaluation pair. The product side is the title, optionally
/// extended by a description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub query: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub label: EsciLabel,
}

impl SimilarityPair {
    pub fn target(&self) -> f64 {
        esci_score_map(self.label)
    }

    pub fn product_text(&self) -> String {
        match &self.description {
            Some(d) => format!("{} {d}", self.title),
            None => self.title.clone(),
        }
    }
}

/// On-tape embedding of one packed sequence: mean of its interior (non
/// boundary-token) hidden rows, scaled to unit norm.
fn embed_rows_on_tape(
    tape: &mut Tape<f32>,
    hidden: NodeId,
    seq_start: usize,
    seq_end: usize,
) -> Result<NodeId> {
    let interior: Vec<usize> = (seq_start + 1..seq_end - 1).collect();
    if interior.is_empty() {
        return Err(Error::data("sequence has no interior tokens to pool"));
    }
    let pooled = tape.mean_rows(hidden, &interior)?;
    tape.l2_normalize(pooled)
}

fn frame(ids: &[TokenId], cls: TokenId, sep: TokenId) -> Vec<TokenId> {
    let mut framed = Vec::with_capacity(ids.len() + 2);
    framed.push(cls);
    framed.extend_from_slice(ids);
    framed.push(sep);
    framed
}

/// Unit-norm embedding of a token sequence: eval-mode forward over
/// `[cls] tokens [sep]`, mean-pooled over the interior rows.
pub fn embed(model: &Model32, tokens: &[TokenId], cls: TokenId, sep: TokenId) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::data("cannot embed an empty token sequence"));
    }
    let framed = frame(tokens, cls, sep);
    let batch = PackedBatch::single(&framed)?;
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, &batch, Mode::Eval)?;
    let emb = embed_rows_on_tape(&mut tape, pass.hidden, 0, framed.len())?;
    Ok(tape.value(emb).to_vec())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Ranking-loss scale.
    pub lambda: f64,
    /// Token budget per side before boundary tokens are added.
    pub max_len: usize,
    /// Update only the final norm gain, leaving the encoder body fixed.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 4,
            batch_size: 8,
            lr: 2e-4,
            lambda: 20.0,
            max_len: 64,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub train_size: usize,
    pub dev_size: usize,
    /// Mean ranking loss per epoch over contributing batches.
    pub epoch_loss: Vec<f64>,
    /// Held-out Spearman after each epoch.
    pub dev_spearman: Vec<f64>,
    /// Batches skipped for having fewer than two distinct target levels.
    pub skipped_batches: usize,
}

struct EncodedPair {
    query: Vec<TokenId>,
    product: Vec<TokenId>,
    target: f64,
    dev: bool,
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const DEV_SALT: u64 = 0xde5a;

fn encode_pairs(
    vocab: &BpeVocab,
    pairs: &[SimilarityPair],
    max_len: usize,
) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut query = vocab.encode(&p.query);
            query.truncate(max_len);
            let mut product = vocab.encode(&p.product_text());
            product.truncate(max_len);
            if query.is_empty() || product.is_empty() {
                return Err(Error::data(format!("pair {i} tokenizes to an empty side")));
            }
            Ok(EncodedPair {
                query,
                product,
                target: p.target(),
                dev: mix(fnv1a64(p.query.as_bytes()) ^ DEV_SALT) % 10 == 0,
            })
        })
        .collect()
}

fn dev_predictions(model: &Model32, dev: &[&EncodedPair], cls: TokenId, sep: TokenId) -> Result<Vec<f64>> {
    dev.iter()
        .map(|p| {
            let q = embed(model, &p.query, cls, sep)?;
            let d = embed(model, &p.product, cls, sep)?;
            Ok(cosine(&q, &d))
        })
        .collect()
}

/// Cosines and Spearman of a pair set under the current model, eval mode.
pub fn evaluate_similarity(
    model: &Model32,
    vocab: &BpeVocab,
    pairs: &[SimilarityPair],
    max_len: usize,
) -> Result<(Vec<f64>, f64)> {
    let encoded = encode_pairs(vocab, pairs, max_len)?;
    let refs: Vec<&EncodedPair> = encoded.iter().collect();
    let s = vocab.specials();
    let cosines = dev_predictions(model, &refs, s.cls, s.sep)?;
    let targets: Vec<f64> = encoded.iter().map(|p| p.target).collect();
    let rho = spearman(&cosines, &targets)?;
    Ok((cosines, rho))
}

/// Fine-tunes the encoder on graded pairs with the pairwise ranking loss,
/// reporting per-epoch training loss and held-out Spearman. The dev split is
/// chosen by a stable hash of the query text (about one pair in ten).
pub fn fine_tune_similarity(
    model: &mut Model32,
    vocab: &BpeVocab,
    pairs: &[SimilarityPair],
    cfg: &FineTuneConfig,
) -> Result<FineTuneReport> {
    if cfg.batch_size < 2 {
        return Err(Error::config("fine-tuning needs batch_size ≥ 2"));
    }
    if cfg.max_len == 0 || cfg.max_len + 2 > model.config.max_seq_len {
        return Err(Error::config(format!(
            "max_len {} does not fit the model context {} with boundary tokens",
            cfg.max_len, model.config.max_seq_len
        )));
    }
    let s = vocab.specials();
    let encoded = encode_pairs(vocab, pairs, cfg.max_len)?;
    let train: Vec<&EncodedPair> = encoded.iter().filter(|p| !p.dev).collect();
    let dev: Vec<&EncodedPair> = encoded.iter().filter(|p| p.dev).collect();
    if dev.len() < 2 {
        return Err(Error::data(format!(
            "dev split holds {} pairs; need at least 2 for a correlation",
            dev.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let dev_targets: Vec<f64> = dev.iter().map(|p| p.target).collect();

    let hyper = OptimizerHyper { peak_lr: cfg.lr, weight_decay: 0.0, ..Default::default() };
    let mut opt = OptimizerState::new();
    let mut report = FineTuneReport {
        train_size: train.len(),
        dev_size: dev.len(),
        epoch_loss: Vec::new(),
        dev_spearman: Vec::new(),
        skipped_batches: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "ft-shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_pairs: Vec<&EncodedPair> = chunk.iter().map(|&i| train[i]).collect();
            let targets: Vec<f64> = batch_pairs.iter().map(|p| p.target).collect();
            let distinct = {
                let mut t = targets.clone();
                t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                t.dedup();
                t.len()
            };
            if distinct < 2 {
                report.skipped_batches += 1;
                continue;
            }
            // Pack all queries and products into one isolated-attention batch.
            let framed: Vec<Vec<TokenId>> = batch_pairs
                .iter()
                .flat_map(|p| [frame(&p.query, s.cls, s.sep), frame(&p.product, s.cls, s.sep)])
                .collect();
            let seq_refs: Vec<&[TokenId]> = framed.iter().map(|f| f.as_slice()).collect();
            let batch = PackedBatch::pack(&seq_refs)?;
            let mut tape = Tape::new();
            let mut drop_rng = stream(cfg.seed, "ft-drop", &[epoch as u64, bi as u64]);
            let pass =
                model.forward_on_tape(&mut tape, &batch, Mode::Train { dropout_rng: &mut drop_rng })?;
            let mut cos_nodes = Vec::with_capacity(batch_pairs.len());
            for pi in 0..batch_pairs.len() {
                let (qs, qe) = batch.seq_range(2 * pi);
                let (ps, pe) = batch.seq_range(2 * pi + 1);
                let q = embed_rows_on_tape(&mut tape, pass.hidden, qs, qe)?;
                let p = embed_rows_on_tape(&mut tape, pass.hidden, ps, pe)?;
                cos_nodes.push(tape.dot(q, p)?);
            }
            let cos = tape.stack_scalars(&cos_nodes)?;
            let loss = tape.cosent_loss(cos, &targets, cfg.lambda)?;
            losses.push(tape.value(loss)[0] as f64);
            tape.backward(loss)?;

            let mut grads: IndexMap<String, Vec<f32>> = IndexMap::new();
            for (name, &node) in &pass.param_ids {
                if cfg.freeze_encoder && name != "final_norm" {
                    continue;
                }
                if let Some(g) = tape.grad(node) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
            if !cfg.freeze_encoder {
                // parameters outside the embedding path (the prediction head)
                // get zero gradients, which leaves them bit-exactly unchanged
                for (name, t) in model.params.iter() {
                    if !grads.contains_key(name) {
                        grads.insert(name.clone(), vec![0.0; t.numel()]);
                    }
                }
            }
            if cfg.freeze_encoder {
                // step a copy so the parameter keeps its slot in the map
                let mut view: IndexMap<String, _> = IndexMap::new();
                view.insert("final_norm".to_string(), model.params["final_norm"].clone());
                stable_adamw_step(&mut view, &grads, &mut opt, &hyper, cfg.lr)?;
                *model.params.get_mut("final_norm").expect("model has a final norm") =
                    view.shift_remove("final_norm").expect("stepped above");
            } else {
                stable_adamw_step(&mut model.params, &grads, &mut opt, &hyper, cfg.lr)?;
            }
        }
        report
            .epoch_loss
            .push(if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 });
        let preds = dev_predictions(model, &dev, s.cls, s.sep)?;
        report.dev_spearman.push(spearman(&preds, &dev_targets)?);
    }
    Ok(report)
}
