//! `train`: drives the three-phase plan over the curated, tokenized corpus.
//! Rerunning a finished run is a no-op; a changed config restarts it; an
//! interrupted run continues from its checkpoint under `--resume`.

use std::path::{Path, PathBuf};

use rexlab_core::corpus::{BpeVocab, SPECIALS};
use rexlab_core::curriculum::{PhaseSpec, TrainSource, Trainer, TrainerConfig};
use rexlab_core::masking::GuidedSpans;
use rexlab_core::{Error, Model32, Result};

use crate::config::LoadedConfig;
use crate::curate::{read_json, read_jsonl_as, CurateDirs, SourceWeight, TokensRecord, CURATE_STAGES};
use crate::lock::DirLock;
use crate::stages;

pub fn train_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("train")
}

/// Phase list with empty mixture vectors replaced by the curated temperature
/// weights (constant across the phase unless the config says otherwise).
pub fn fill_mixtures(phases: &[PhaseSpec], weights: &[SourceWeight]) -> Vec<PhaseSpec> {
    let w: Vec<f64> = weights.iter().map(|s| s.weight).collect();
    phases
        .iter()
        .cloned()
        .map(|mut p| {
            if p.mixture_start.is_empty() {
                p.mixture_start = w.clone();
            }
            if p.mixture_end.is_empty() {
                p.mixture_end = p.mixture_start.clone();
            }
            p
        })
        .collect()
}

/// Loads the tokenized sources in config order.
pub fn load_sources(cfg: &LoadedConfig) -> Result<Vec<TrainSource>> {
    let dirs = CurateDirs::new(&cfg.run.output_dir);
    let mut out = Vec::with_capacity(cfg.run.sources.len());
    for s in &cfg.run.sources {
        let records: Vec<TokensRecord> = read_jsonl_as(&dirs.per_source("tokens", &s.name))?;
        let mut docs = Vec::with_capacity(records.len());
        let mut spans = Vec::with_capacity(records.len());
        for r in records {
            docs.push(r.ids);
            spans.push(GuidedSpans::new(r.spans));
        }
        out.push(TrainSource { name: s.name.clone(), docs, spans });
    }
    Ok(out)
}

/// The model shape with derived fields resolved against the tokenizer and
/// phase plan.
pub fn resolve_model_config(
    cfg: &LoadedConfig,
    vocab: &BpeVocab,
    phases: &[PhaseSpec],
) -> Result<rexlab_core::encoder::EncoderConfig> {
    let mut m = cfg.run.model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.vocab_size();
    } else if m.vocab_size != vocab.vocab_size() {
        return Err(Error::config(format!(
            "model.vocab_size {} does not match the tokenizer's {}",
            m.vocab_size,
            vocab.vocab_size()
        )));
    }
    if m.max_seq_len == 0 {
        m.max_seq_len = phases.first().map(|p| p.seq_len).unwrap_or(4);
    }
    m.validate()?;
    Ok(m)
}

pub fn trainer_config(cfg: &LoadedConfig) -> TrainerConfig {
    TrainerConfig {
        run_dir: train_dir(&cfg.run.output_dir),
        checkpoint_every: cfg.run.train.checkpoint_every,
        step_limit: cfg.run.train.step_limit,
        mask_token: SPECIALS.mask,
        cls_token: SPECIALS.cls,
        sep_token: SPECIALS.sep,
        hyper: cfg.run.train.optimizer.clone(),
    }
}

pub fn cmd_train(cfg: &LoadedConfig, resume: bool) -> Result<()> {
    let run = &cfg.run;
    let curate_dirs = CurateDirs::new(&run.output_dir);
    stages::check_all_done(&curate_dirs.root, &cfg.hash, &CURATE_STAGES, "curate")?;

    let _lock = DirLock::acquire(&run.output_dir)?;
    let tdir = train_dir(&run.output_dir);
    if stages::is_done(&tdir, "train", &cfg.hash) {
        println!("train: up to date");
        return Ok(());
    }
    // The hash the run (finished or not) was started under; a mismatch means
    // the config changed and the old run no longer answers for it.
    let hash_file = tdir.join("config.hash");
    let started_under = std::fs::read_to_string(&hash_file).ok();
    if tdir.exists() && started_under.as_deref().map(str::trim) != Some(cfg.hash.as_str()) {
        println!("train: config changed; discarding the previous run");
        std::fs::remove_dir_all(&tdir)?;
    }
    std::fs::create_dir_all(&tdir)?;
    std::fs::write(&hash_file, &cfg.hash)?;

    let vocab = BpeVocab::load(&curate_dirs.vocab())?;
    let weights: Vec<SourceWeight> = read_json(&curate_dirs.weights())?;
    let phases = fill_mixtures(&run.phases, &weights);
    let sources = load_sources(cfg)?;
    let tcfg = trainer_config(cfg);

    let checkpoint_exists = tdir.join("checkpoint").join("run.json").is_file();
    let mut trainer = if checkpoint_exists {
        if !resume {
            return Err(Error::config(format!(
                "an unfinished checkpoint exists under {}; pass --resume to continue it",
                tdir.display()
            )));
        }
        println!("train: resuming from checkpoint");
        Trainer::resume(phases, sources, tcfg)?
    } else {
        let mcfg = resolve_model_config(cfg, &vocab, &phases)?;
        let model = Model32::build(mcfg, run.seed)?;
        println!(
            "train: fresh model with {} parameters over a {}-token vocabulary",
            model.param_count(),
            vocab.vocab_size()
        );
        Trainer::new(model, phases, sources, tcfg, run.seed)?
    };

    let records = trainer.run()?;
    let finished = trainer.state.phase_index >= trainer.phases.len();
    if let Some(last) = records.last() {
        println!(
            "train: {} steps this invocation; last phase `{}` step {} loss {}",
            records.len(),
            last.phase.name(),
            last.step,
            last.loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "skipped".into())
        );
    } else {
        println!("train: nothing left to do");
    }
    if finished {
        stages::mark_done(&tdir, "train", &cfg.hash)?;
        println!("train: complete; checkpoint at {}", tdir.join("checkpoint").display());
    } else {
        println!("train: paused before the budget; rerun with --resume to continue");
    }
    Ok(())
}
