//! The step loop that drives a model through the phase plan: mixture-weighted
//! chunk sampling, masking, packed forward/backward, clipped optimizer steps,
//! and bit-exact checkpoint/resume.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    load_model, load_optimizer, load_run_state, save_model, save_optimizer, save_run_state, Mode,
    PackedBatch,
};
use crate::error::{Error, Result};
use crate::kernels::Tape;
use crate::masking::{apply_corruption, mix_batch, GuidedSpans, MaskingPolicy};
use crate::optim::{batch_size_at, stable_adamw_step, wsd_lr, OptimizerHyper, OptimizerState};
use crate::rng::stream;
use crate::{Model32, TokenId};

use super::{anneal_mixture, plan_phases, transition, PhaseKind, PhaseSpec};

/// File name of the per-step metrics log inside the run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One named pool of pre-tokenized documents, with optional guided-masking
/// span annotations (empty spans where a document has none).
#[derive(Debug, Clone)]
pub struct TrainSource {
    pub name: String,
    pub docs: Vec<Vec<TokenId>>,
    pub spans: Vec<GuidedSpans>,
}

impl TrainSource {
    pub fn new(name: impl Into<String>, docs: Vec<Vec<TokenId>>) -> Self {
        let spans = vec![GuidedSpans::empty(); docs.len()];
        TrainSource { name: name.into(), docs, spans }
    }

    pub fn with_spans(mut self, spans: Vec<GuidedSpans>) -> Self {
        self.spans = spans;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(Error::config(format!("source `{}` has no documents", self.name)));
        }
        if self.docs.iter().any(|d| d.is_empty()) {
            return Err(Error::config(format!("source `{}` contains an empty document", self.name)));
        }
        if self.spans.len() != self.docs.len() {
            return Err(Error::config(format!(
                "source `{}`: {} span sets for {} documents",
                self.name,
                self.spans.len(),
                self.docs.len()
            )));
        }
        Ok(())
    }
}

/// Read position within one source: which pass over the data, which document
/// of that pass's shuffled order, and the token offset inside it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCursor {
    pub epoch: u64,
    pub doc: usize,
    pub offset: usize,
}

/// Everything beyond parameters and optimizer moments needed to resume a run
/// exactly: the position in the phase plan and in every source stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub master_seed: u64,
    pub phase_index: usize,
    pub step_in_phase: u64,
    pub tokens_in_phase: u64,
    pub tokens_per_source: Vec<u64>,
    pub cursors: Vec<SourceCursor>,
}

impl RunState {
    pub fn new(master_seed: u64, num_sources: usize) -> Self {
        RunState {
            master_seed,
            phase_index: 0,
            step_in_phase: 0,
            tokens_in_phase: 0,
            tokens_per_source: vec![0; num_sources],
            cursors: vec![SourceCursor::default(); num_sources],
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: PhaseKind,
    pub step: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Tokens processed by this step's batch, markers included.
    pub batch_tokens: u64,
    /// Cumulative tokens in the phase after this step.
    pub tokens_in_phase: u64,
    /// Mean masked-position cross entropy; `None` when the batch had no
    /// masked positions and the optimizer step was skipped.
    pub loss: Option<f64>,
    pub mixture: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    /// Run directory: checkpoints go to `<run_dir>/checkpoint`, metrics to
    /// `<run_dir>/metrics.jsonl`.
    pub run_dir: PathBuf,
    /// Checkpoint every N steps (besides the automatic final checkpoint).
    pub checkpoint_every: Option<u64>,
    /// Pause after this many optimizer steps in one `run` call (checkpointing
    /// first, so a later call continues); `None` runs to the token budgets.
    pub step_limit: Option<u64>,
    pub mask_token: TokenId,
    pub cls_token: TokenId,
    pub sep_token: TokenId,
    pub hyper: OptimizerHyper,
}

impl TrainerConfig {
    pub fn new(run_dir: impl Into<PathBuf>, mask: TokenId, cls: TokenId, sep: TokenId) -> Self {
        TrainerConfig {
            run_dir: run_dir.into(),
            checkpoint_every: None,
            step_limit: None,
            mask_token: mask,
            cls_token: cls,
            sep_token: sep,
            hyper: OptimizerHyper::default(),
        }
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoint")
    }
}

/// Deterministic per-epoch document order for one source.
fn shuffled_order(master: u64, phase: usize, src: usize, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(master, "shuffle", &[phase as u64, src as u64, epoch]);
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    pub model: Model32,
    pub opt: OptimizerState<f32>,
    pub state: RunState,
    pub phases: Vec<PhaseSpec>,
    pub sources: Vec<TrainSource>,
    pub cfg: TrainerConfig,
    /// Cached shuffled document orders for each source's current epoch.
    orders: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(
        model: Model32,
        phases: Vec<PhaseSpec>,
        sources: Vec<TrainSource>,
        cfg: TrainerConfig,
        master_seed: u64,
    ) -> Result<Self> {
        let phases = plan_phases(phases)?;
        let state = RunState::new(master_seed, sources.len());
        let mut t = Trainer { model, opt: OptimizerState::new(), state, phases, sources, cfg, orders: Vec::new() };
        t.validate()?;
        t.refresh_orders();
        Ok(t)
    }

    /// Reopens a checkpointed run; `phases`, `sources`, and `cfg` must match
    /// the original invocation (only the run state is persisted).
    pub fn resume(phases: Vec<PhaseSpec>, sources: Vec<TrainSource>, cfg: TrainerConfig) -> Result<Self> {
        let dir = cfg.checkpoint_dir();
        let model = load_model(&dir)?;
        let opt = load_optimizer(&dir)?;
        let state: RunState = load_run_state(&dir.join("run.json"))?;
        let phases = plan_phases(phases)?;
        if state.cursors.len() != sources.len() {
            return Err(Error::config(format!(
                "checkpoint tracks {} sources, got {}",
                state.cursors.len(),
                sources.len()
            )));
        }
        if state.phase_index > phases.len() {
            return Err(Error::config(format!(
                "checkpoint is at phase {} of a {}-phase plan",
                state.phase_index,
                phases.len()
            )));
        }
        let mut t = Trainer { model, opt, state, phases, sources, cfg, orders: Vec::new() };
        t.validate()?;
        t.refresh_orders();
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("trainer needs at least one source"));
        }
        for s in &self.sources {
            s.validate()?;
        }
        for p in &self.phases {
            if p.mixture_start.len() != self.sources.len() {
                return Err(Error::config(format!(
                    "phase `{}` mixes {} sources but {} were provided",
                    p.name.name(),
                    p.mixture_start.len(),
                    self.sources.len()
                )));
            }
        }
        let first = self.state.phase_index.min(self.phases.len() - 1);
        if self.phases[first].seq_len > self.model.config.max_seq_len {
            return Err(Error::config(format!(
                "phase seq_len {} exceeds the model's limit {}",
                self.phases[first].seq_len, self.model.config.max_seq_len
            )));
        }
        let v = self.model.config.vocab_size as TokenId;
        if self.cfg.mask_token >= v || self.cfg.cls_token >= v || self.cfg.sep_token >= v {
            return Err(Error::config("marker tokens fall outside the model vocabulary"));
        }
        Ok(())
    }

    fn refresh_orders(&mut self) {
        let p = self.state.phase_index.min(self.phases.len().saturating_sub(1));
        self.orders = self
            .sources
            .iter()
            .enumerate()
            .map(|(s, src)| {
                shuffled_order(self.state.master_seed, p, s, self.state.cursors[s].epoch, src.docs.len())
            })
            .collect();
    }

    /// Next chunk of at most `want` tokens from one source. Chunks never span
    /// documents; reaching the end of the pass reshuffles and starts the next.
    fn next_chunk(&mut self, src: usize, want: usize) -> (Vec<TokenId>, GuidedSpans) {
        let phase = self.state.phase_index;
        let master = self.state.master_seed;
        let n = self.sources[src].docs.len();
        let cur = &mut self.state.cursors[src];
        let d = self.orders[src][cur.doc];
        let doc = &self.sources[src].docs[d];
        let take = want.min(doc.len() - cur.offset);
        let chunk = doc[cur.offset..cur.offset + take].to_vec();
        let spans = self.sources[src].spans[d].window(cur.offset, cur.offset + take);
        cur.offset += take;
        if cur.offset >= doc.len() {
            cur.offset = 0;
            cur.doc += 1;
            if cur.doc >= n {
                cur.doc = 0;
                cur.epoch += 1;
                self.orders[src] = shuffled_order(master, phase, src, cur.epoch, n);
            }
        }
        (chunk, spans)
    }

    fn append_metrics(&self, rec: &StepRecord) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.run_dir)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.cfg.run_dir.join(METRICS_FILE))?;
        let line = serde_json::to_string(rec).map_err(Error::from)?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn save_checkpoint(&self) -> Result<()> {
        let dir = self.cfg.checkpoint_dir();
        save_model(&dir, &self.model)?;
        save_optimizer(&dir, &self.opt)?;
        save_run_state(&dir.join("run.json"), &self.state)
    }

    /// One training step of the current phase. Advances cursors and token
    /// accounting even when the batch holds no masked positions (in which
    /// case the optimizer step is skipped and `loss` is `None`).
    fn train_step(&mut self, phase: &PhaseSpec) -> Result<StepRecord> {
        let p = self.state.phase_index as u64;
        let t = self.state.step_in_phase;
        let master = self.state.master_seed;
        let bs = batch_size_at(t, &phase.schedule);
        let lr = wsd_lr(t, &phase.schedule);
        let mixture = anneal_mixture(self.state.tokens_in_phase, phase);
        let want = phase.seq_len - 2; // room for the two marker tokens

        // Route each slot to a source by the annealed mixture, then draw its
        // chunk; slot order is fixed, so cursor motion is deterministic.
        let mut slot_sources = Vec::with_capacity(bs);
        let mut chunks: Vec<(Vec<TokenId>, GuidedSpans)> = Vec::with_capacity(bs);
        for slot in 0..bs {
            let u: f64 = stream(master, "mix", &[p, t, slot as u64]).gen();
            let mut acc = 0.0;
            let mut pick = mixture.len() - 1;
            for (i, w) in mixture.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            slot_sources.push(pick);
            chunks.push(self.next_chunk(pick, want));
        }

        let policy = MaskingPolicy {
            mask_ratio: phase.mask_ratio,
            mean_span: phase.mean_span,
            guided_fraction: phase.guided_fraction,
            ..MaskingPolicy::default()
        };
        let seqs: Vec<(usize, &GuidedSpans)> =
            chunks.iter().map(|(c, s)| (c.len(), s)).collect();
        let mut mask_rng = stream(master, "mask", &[p, t]);
        let mut routed = mix_batch(&seqs, &policy, &mut mask_rng);

        let vocab = self.model.config.vocab_size;
        let mut framed: Vec<Vec<TokenId>> = Vec::with_capacity(bs);
        for (slot, ((chunk, _), r)) in chunks.iter().zip(routed.iter_mut()).enumerate() {
            let mut c_rng = stream(master, "corrupt", &[p, t, slot as u64]);
            let corrupted =
                apply_corruption(chunk, &mut r.plan, &policy, vocab, self.cfg.mask_token, &mut c_rng)?;
            let mut seq = Vec::with_capacity(corrupted.len() + 2);
            seq.push(self.cfg.cls_token);
            seq.extend_from_slice(&corrupted);
            seq.push(self.cfg.sep_token);
            framed.push(seq);
        }
        let refs: Vec<&[TokenId]> = framed.iter().map(|s| s.as_slice()).collect();
        let batch = PackedBatch::pack(&refs)?;

        // Masked positions in flat batch coordinates (+1 for the lead marker).
        let mut flat_positions = Vec::new();
        let mut labels = Vec::new();
        for (slot, r) in routed.iter().enumerate() {
            let (start, _) = batch.seq_range(slot);
            for (&pos, &label) in r.plan.positions.iter().zip(&r.plan.labels) {
                flat_positions.push(start + 1 + pos);
                labels.push(label);
            }
        }

        let loss = if flat_positions.is_empty() {
            None
        } else {
            let mut tape = Tape::<f32>::new();
            let mut drop_rng = stream(master, "drop", &[p, t]);
            let pass =
                self.model
                    .forward_on_tape(&mut tape, &batch, Mode::Train { dropout_rng: &mut drop_rng })?;
            let logits = self.model.mlm_logits_on_tape(&mut tape, &pass, &flat_positions)?;
            let loss_id = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss_id)[0] as f64;
            tape.backward(loss_id)?;
            let mut grads: IndexMap<String, Vec<f32>> = IndexMap::with_capacity(pass.param_ids.len());
            for (name, &id) in &pass.param_ids {
                let g = tape
                    .grad(id)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.model.params[name].data().len()]);
                grads.insert(name.clone(), g);
            }
            stable_adamw_step(&mut self.model.params, &grads, &mut self.opt, &self.cfg.hyper, lr)?;
            Some(loss_val)
        };

        let batch_tokens = batch.total_tokens() as u64;
        self.state.tokens_in_phase += batch_tokens;
        for (slot, &src) in slot_sources.iter().enumerate() {
            let (start, end) = batch.seq_range(slot);
            self.state.tokens_per_source[src] += (end - start) as u64;
        }
        self.state.step_in_phase += 1;

        let rec = StepRecord {
            phase: phase.name,
            step: t,
            lr,
            batch_size: bs,
            batch_tokens,
            tokens_in_phase: self.state.tokens_in_phase,
            loss,
            mixture,
        };
        self.append_metrics(&rec)?;
        Ok(rec)
    }

    /// Runs the current phase until its token budget is met. Returns `false`
    /// when paused early by the invocation step limit (after checkpointing).
    fn run_current_phase(&mut self, records: &mut Vec<StepRecord>) -> Result<bool> {
        let phase = self.phases[self.state.phase_index].clone();
        if self.state.step_in_phase == 0 && self.state.tokens_in_phase == 0 {
            // Fresh phase entry: restart every source stream under the new
            // phase's shuffle schedule.
            for c in &mut self.state.cursors {
                *c = SourceCursor::default();
            }
            self.refresh_orders();
        }
        while self.state.tokens_in_phase < phase.token_budget {
            if let Some(cap) = self.cfg.step_limit {
                if records.len() as u64 >= cap {
                    self.save_checkpoint()?;
                    return Ok(false);
                }
            }
            let rec = self.train_step(&phase)?;
            records.push(rec);
            if let Some(every) = self.cfg.checkpoint_every {
                if every > 0 && self.state.step_in_phase % every == 0 {
                    self.save_checkpoint()?;
                }
            }
        }
        Ok(true)
    }

    /// Runs all remaining phases (respecting any invocation step limit) and
    /// leaves a final checkpoint. Returns the records of this call's steps.
    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.state.phase_index < self.phases.len() {
            if !self.run_current_phase(&mut records)? {
                return Ok(records);
            }
            if self.state.phase_index + 1 < self.phases.len() {
                let from = self.phases[self.state.phase_index].clone();
                let to = self.phases[self.state.phase_index + 1].clone();
                transition(&mut self.model, &from, &to)?;
            }
            self.state.phase_index += 1;
            self.state.step_in_phase = 0;
            self.state.tokens_in_phase = 0;
            self.save_checkpoint()?;
        }
        Ok(records)
    }
}
