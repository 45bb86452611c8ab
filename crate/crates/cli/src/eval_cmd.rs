//! `eval`: loads the trained checkpoint and runs the enabled suites — the
//! masked-recovery grid over block sizes and top-k values, and (when a pair
//! file is configured) the graded-similarity protocol with its per-epoch
//! held-out correlation series.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rexlab_core::corpus::{read_jsonl, BpeVocab, SPECIALS};
use rexlab_core::eval::{
    evaluate_similarity, fine_tune_similarity, model_recovery, FineTuneReport, RecoveryRow,
    SimilarityPair,
};
use rexlab_core::rng::derive_seed;
use rexlab_core::{Error, Result, TokenId};

use crate::config::LoadedConfig;
use crate::curate::{read_jsonl_as, CurateDirs};
use crate::lock::DirLock;
use crate::stages;
use crate::train::train_dir;

pub fn eval_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("eval")
}

/// Similarity-suite output: the checkpoint's correlation before any tuning,
/// then the fine-tuning report with its per-epoch held-out series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub baseline_spearman: f64,
    pub fine_tune: FineTuneReport,
}

/// Documents to evaluate on: the configured file, or the curated corpus.
fn eval_token_docs(cfg: &LoadedConfig, vocab: &BpeVocab) -> Result<Vec<Vec<TokenId>>> {
    let run = &cfg.run;
    let mut docs: Vec<Vec<TokenId>> = Vec::new();
    match &run.eval.docs {
        Some(path) => {
            for d in read_jsonl(path)? {
                docs.push(vocab.encode(&d.text));
            }
        }
        None => {
            let dirs = CurateDirs::new(&run.output_dir);
            for s in &run.sources {
                let records: Vec<crate::curate::TokensRecord> =
                    read_jsonl_as(&dirs.per_source("tokens", &s.name))?;
                docs.extend(records.into_iter().map(|r| r.ids));
            }
        }
    }
    docs.retain(|d| !d.is_empty());
    docs.truncate(run.eval.max_docs);
    if docs.is_empty() {
        return Err(Error::data("no documents to evaluate on"));
    }
    Ok(docs)
}

pub fn cmd_eval(cfg: &LoadedConfig) -> Result<()> {
    let run = &cfg.run;
    let ckpt = train_dir(&run.output_dir).join("checkpoint");
    if !ckpt.join("model.json").is_file() {
        return Err(Error::config(format!(
            "no checkpoint at {}; run `train` first",
            ckpt.display()
        )));
    }
    let model = rexlab_core::encoder::load_model(&ckpt)?;
    let vocab = BpeVocab::load(&CurateDirs::new(&run.output_dir).vocab())?;
    if model.config.vocab_size != vocab.vocab_size() {
        return Err(Error::data(format!(
            "checkpoint vocabulary {} does not match the tokenizer's {}",
            model.config.vocab_size,
            vocab.vocab_size()
        )));
    }

    let _lock = DirLock::acquire(&run.output_dir)?;
    let edir = eval_dir(&run.output_dir);
    std::fs::create_dir_all(&edir)?;

    // Recovery grid. Blocks that cannot be framed within the model context
    // are skipped with a notice rather than failing the whole suite.
    let docs = eval_token_docs(cfg, &vocab)?;
    let seed = derive_seed(run.seed, "eval", &[]);
    let mut rows: Vec<RecoveryRow> = Vec::new();
    let mut skipped_docs = 0usize;
    for &block in &run.eval.block_sizes {
        if block + 2 > model.config.max_seq_len {
            eprintln!(
                "note: block size {block} does not fit the model context {}; skipped",
                model.config.max_seq_len
            );
            continue;
        }
        let report = model_recovery(
            &model,
            SPECIALS.cls,
            SPECIALS.sep,
            SPECIALS.mask,
            &docs,
            block,
            &run.eval.ks,
            seed,
        )?;
        skipped_docs = skipped_docs.max(report.skipped_docs);
        rows.extend(report.rows);
    }
    if rows.is_empty() {
        return Err(Error::config(
            "no configured block size fits the model context; nothing to evaluate",
        ));
    }
    rexlab_core::corpus::write_jsonl(&edir.join("recovery.jsonl"), &rows)?;
    std::fs::write(&edir.join("recovery.csv"), recovery_csv(&rows))?;
    print_grid(&rows, docs.len(), skipped_docs);

    // Similarity suite, when configured.
    if let Some(pair_path) = &run.eval.similarity_pairs {
        let pairs: Vec<SimilarityPair> = read_jsonl_as(pair_path)?;
        let (_, baseline) = evaluate_similarity(&model, &vocab, &pairs, run.eval.fine_tune.max_len)?;
        let mut tuned = model.clone();
        let mut ft = run.eval.fine_tune.clone();
        ft.seed = derive_seed(run.seed, "fine-tune", &[]);
        let report = fine_tune_similarity(&mut tuned, &vocab, &pairs, &ft)?;
        println!(
            "similarity: baseline spearman {:.4}; after tuning {:.4} (dev size {})",
            baseline,
            report.dev_spearman.last().copied().unwrap_or(f64::NAN),
            report.dev_size
        );
        let summary = SimilaritySummary { baseline_spearman: baseline, fine_tune: report };
        let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
        std::fs::write(edir.join("similarity.json"), text)?;
    }

    stages::mark_done(&edir, "eval", &cfg.hash)?;
    Ok(())
}

/// CSV form of the grid; floats use the shortest representation that parses
/// back to the same value.
pub fn recovery_csv(rows: &[RecoveryRow]) -> String {
    let mut out = String::from("block_size,k,accuracy,masked_positions\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.block_size, r.k, r.accuracy, r.masked_positions));
    }
    out
}

fn print_grid(rows: &[RecoveryRow], docs: usize, skipped: usize) {
    let mut blocks: Vec<usize> = rows.iter().map(|r| r.block_size).collect();
    blocks.dedup();
    let mut ks: Vec<usize> = rows.iter().filter(|r| r.block_size == blocks[0]).map(|r| r.k).collect();
    ks.sort_unstable();
    println!("recovery over {docs} documents ({skipped} too short for the largest block):");
    print!("{:>10}", "block");
    for k in &ks {
        print!("{:>12}", format!("top-{k}"));
    }
    println!();
    for b in blocks {
        print!("{b:>10}");
        for k in &ks {
            match rows.iter().find(|r| r.block_size == b && r.k == *k) {
                Some(r) => print!("{:>12.4}", r.accuracy),
                None => print!("{:>12}", "-"),
            }
        }
        println!();
    }
}
