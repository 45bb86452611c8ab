//! Encoder model: parameter construction, the tape forward pass, and the
//! weight-tied masked-token head.

use std::sync::Arc;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{AttentionLayout, NodeId, Tape, Tensor};
use crate::rng::stream;
use crate::scalar::Scalar;

use super::config::EncoderConfig;
use super::layout::{layout_for, rope_freqs, PackedBatch};

/// Forward mode: evaluation, or training with a dropout stream.
pub enum Mode<'r> {
    Eval,
    Train { dropout_rng: &'r mut ChaCha8Rng },
}

/// Handles into a tape after a forward pass: the final hidden states and the
/// node id of every registered parameter (for gradient extraction).
pub struct ForwardPass {
    pub hidden: NodeId,
    pub param_ids: IndexMap<String, NodeId>,
}

/// The encoder: a configuration plus named parameter tensors.
#[derive(Clone, Debug)]
pub struct EncoderModel<S: Scalar> {
    pub config: EncoderConfig,
    pub params: IndexMap<String, Tensor<S>>,
}

/// Draws from a normal truncated at ±2σ, by rejection.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<S: Scalar> EncoderModel<S> {
    /// Builds a model with truncated-normal init (std 0.02); the residual
    /// output projections are scaled down by `1/√(2·layers)`.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", &[]);
        let mut params = IndexMap::new();
        let h = config.hidden;
        let ff = config.intermediate;
        let base_std = 0.02;
        let out_std = base_std / (2.0 * config.layers as f64).sqrt();

        let weight = |params: &mut IndexMap<String, Tensor<S>>,
                          name: String,
                          shape: &[usize],
                          std: f64,
                          rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| S::from_f64_lossy(trunc_normal(rng, std)))
                .collect();
            params.insert(name, Tensor::from_vec(shape, data).expect("shape consistent"));
        };
        let gamma = |params: &mut IndexMap<String, Tensor<S>>, name: String| {
            params.insert(name, Tensor::from_vec(&[h], vec![S::one(); h]).expect("shape"));
        };

        weight(&mut params, "embed.tokens".into(), &[config.vocab_size, h], base_std, &mut rng);
        for l in 0..config.layers {
            gamma(&mut params, format!("layer{l}.attn.norm"));
            weight(&mut params, format!("layer{l}.attn.wq"), &[h, h], base_std, &mut rng);
            weight(&mut params, format!("layer{l}.attn.wk"), &[h, h], base_std, &mut rng);
            weight(&mut params, format!("layer{l}.attn.wv"), &[h, h], base_std, &mut rng);
            weight(&mut params, format!("layer{l}.attn.wo"), &[h, h], out_std, &mut rng);
            gamma(&mut params, format!("layer{l}.ffn.norm"));
            weight(&mut params, format!("layer{l}.ffn.w"), &[h, ff], base_std, &mut rng);
            weight(&mut params, format!("layer{l}.ffn.v"), &[h, ff], base_std, &mut rng);
            weight(&mut params, format!("layer{l}.ffn.wo"), &[ff, h], out_std, &mut rng);
        }
        gamma(&mut params, "final_norm".into());
        weight(&mut params, "head.dense".into(), &[h, h], base_std, &mut rng);
        gamma(&mut params, "head.norm".into());

        Ok(EncoderModel { config, params })
    }

    /// Total learnable parameter count (the vocabulary projection is tied to
    /// the embedding, so it adds nothing).
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn param(&self, name: &str) -> &Tensor<S> {
        &self.params[name]
    }

    /// Runs the full encoder over a packed batch on `tape`, returning the
    /// final hidden states `[total_tokens, hidden]` and parameter node ids.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        batch: &PackedBatch,
        mode: Mode<'_>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if batch.max_seq_len() > cfg.max_seq_len {
            return Err(Error::data(format!(
                "sequence of length {} exceeds the model's limit {}",
                batch.max_seq_len(),
                cfg.max_seq_len
            )));
        }
        if let Some(p) = batch.tokens().iter().position(|&t| (t as usize) >= cfg.vocab_size) {
            return Err(Error::data(format!(
                "token id {} at position {p} exceeds vocab size {}",
                batch.tokens()[p],
                cfg.vocab_size
            )));
        }

        let mut param_ids = IndexMap::with_capacity(self.params.len());
        for (name, t) in &self.params {
            param_ids.insert(name.clone(), tape.tensor(t));
        }
        let id = |param_ids: &IndexMap<String, NodeId>, name: &str| param_ids[name];

        let freqs = Arc::new(rope_freqs(cfg.head_dim(), cfg.rope_base, cfg.ntk_scale)?.inv_freq);
        let positions = Arc::new(batch.positions());

        let mut dropout_rng = match mode {
            Mode::Eval => None,
            Mode::Train { dropout_rng } => Some(dropout_rng),
        };
        let p_drop = cfg.dropout;
        let mut maybe_dropout = |tape: &mut Tape<S>, x: NodeId| -> Result<NodeId> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if p_drop > 0.0 => tape.dropout(x, p_drop, rng),
                _ => Ok(x),
            }
        };

        // Layouts are shared across layers of the same kind.
        let local_layout: Arc<AttentionLayout> = Arc::new(layout_for(batch, false, cfg.window));
        let global_layout: Arc<AttentionLayout> = Arc::new(layout_for(batch, true, cfg.window));

        let mut x = tape.embed(id(&param_ids, "embed.tokens"), batch.tokens())?;
        x = maybe_dropout(tape, x)?;
        for l in 0..cfg.layers {
            let a_in =
                tape.layer_norm_nobias(x, id(&param_ids, &format!("layer{l}.attn.norm")), cfg.norm_eps)?;
            let q = tape.matmul(a_in, id(&param_ids, &format!("layer{l}.attn.wq")))?;
            let k = tape.matmul(a_in, id(&param_ids, &format!("layer{l}.attn.wk")))?;
            let v = tape.matmul(a_in, id(&param_ids, &format!("layer{l}.attn.wv")))?;
            let q = tape.rope_apply(q, Arc::clone(&positions), Arc::clone(&freqs), cfg.heads)?;
            let k = tape.rope_apply(k, Arc::clone(&positions), Arc::clone(&freqs), cfg.heads)?;
            let layout = if (l + 1) % cfg.global_every == 0 {
                Arc::clone(&global_layout)
            } else {
                Arc::clone(&local_layout)
            };
            let att = tape.sdpa(q, k, v, layout, cfg.heads)?;
            let o = tape.matmul(att, id(&param_ids, &format!("layer{l}.attn.wo")))?;
            let o = maybe_dropout(tape, o)?;
            x = tape.add(x, o)?;

            let f_in =
                tape.layer_norm_nobias(x, id(&param_ids, &format!("layer{l}.ffn.norm")), cfg.norm_eps)?;
            let gated = tape.geglu(
                f_in,
                id(&param_ids, &format!("layer{l}.ffn.w")),
                id(&param_ids, &format!("layer{l}.ffn.v")),
            )?;
            let o2 = tape.matmul(gated, id(&param_ids, &format!("layer{l}.ffn.wo")))?;
            let o2 = maybe_dropout(tape, o2)?;
            x = tape.add(x, o2)?;
        }
        let hidden = tape.layer_norm_nobias(x, id(&param_ids, "final_norm"), cfg.norm_eps)?;
        Ok(ForwardPass { hidden, param_ids })
    }

    /// Vocabulary logits at the given flat token positions: a dense + GELU +
    /// norm transform followed by projection onto the transposed embedding.
    /// Empty positions yield an empty `[0, vocab]` node.
    pub fn mlm_logits_on_tape(
        &self,
        tape: &mut Tape<S>,
        pass: &ForwardPass,
        positions: &[usize],
    ) -> Result<NodeId> {
        let rows = tape.gather_rows(pass.hidden, positions)?;
        let d = tape.matmul(rows, pass.param_ids["head.dense"])?;
        let d = tape.gelu(d)?;
        let d = tape.layer_norm_nobias(d, pass.param_ids["head.norm"], self.config.norm_eps)?;
        tape.matmul_transposed(d, pass.param_ids["embed.tokens"])
    }

    /// Evaluation-mode forward; returns the final hidden states as a tensor.
    pub fn forward(&self, batch: &PackedBatch) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch, Mode::Eval)?;
        Ok(tape.to_tensor(pass.hidden))
    }

    /// Evaluation-mode masked-position logits as a tensor.
    pub fn mlm_logits(&self, batch: &PackedBatch, positions: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch, Mode::Eval)?;
        let logits = self.mlm_logits_on_tape(&mut tape, &pass, positions)?;
        Ok(tape.to_tensor(logits))
    }

    /// Converts parameters (and config) to another precision.
    pub fn cast<T: Scalar>(&self) -> EncoderModel<T> {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Closed-form parameter count for a config, for cross-checking
/// [`EncoderModel::param_count`].
pub fn expected_param_count(cfg: &EncoderConfig) -> usize {
    let h = cfg.hidden;
    let ff = cfg.intermediate;
    let per_layer = 4 * h * h + 2 * h * ff + ff * h + 2 * h;
    cfg.vocab_size * h + cfg.layers * per_layer + h + h * h + h
}
