//! `curate`: raw shards → filtered, deduplicated, classifier-thresholded
//! corpus with temperature mixture weights, a trained tokenizer, and
//! token-level guided spans. Each stage is resumable via `<stage>.done`
//! markers keyed by the config hash.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rexlab_core::corpus::{
    blocklist_filter, calibrate_threshold, dedup, label_oracle, language_filter,
    mine_guided_spans, read_jsonl, reservoir_sample, temperature_weights, train_bpe,
    train_classifier, write_jsonl, BpeVocab, Document, Lexicon, NGramClassifier, TokenLexicon,
};
use rexlab_core::rng::{derive_seed, stream};
use rexlab_core::{Error, Result, TokenId};

use crate::config::LoadedConfig;
use crate::lock::DirLock;
use crate::stages::run_stages;

/// Curation stages in execution order.
pub const CURATE_STAGES: [&str; 8] =
    ["filter", "dedup", "label", "classifier", "threshold", "weights", "tokenizer", "tokenize"];

/// Per-source retention counts for the filter stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStat {
    pub source: String,
    pub input: usize,
    pub after_language: usize,
    pub after_blocklist: usize,
    pub after_sample: usize,
}

/// Mixture weight entry produced by the weights stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub name: String,
    pub retained: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInfo {
    pub threshold: f64,
    pub calibrated: bool,
}

/// One tokenized document with its mined guided spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensRecord {
    pub id: String,
    pub ids: Vec<TokenId>,
    pub spans: Vec<(usize, usize)>,
}

/// Reads line-delimited JSON into any deserializable record type.
pub fn read_jsonl_as<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Well-known artifact locations inside `<output_dir>/curate`.
pub struct CurateDirs {
    pub root: PathBuf,
}

impl CurateDirs {
    pub fn new(output_dir: &Path) -> Self {
        CurateDirs { root: output_dir.join("curate") }
    }
    pub fn per_source(&self, stage_dir: &str, name: &str) -> PathBuf {
        self.root.join(stage_dir).join(format!("{name}.jsonl"))
    }
    pub fn filter_stats(&self) -> PathBuf {
        self.root.join("filter_stats.jsonl")
    }
    pub fn dedup_clusters(&self) -> PathBuf {
        self.root.join("dedup_clusters.json")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.json")
    }
    pub fn classifier_report(&self) -> PathBuf {
        self.root.join("classifier_report.json")
    }
    pub fn threshold(&self) -> PathBuf {
        self.root.join("threshold.json")
    }
    pub fn domain_stats(&self) -> PathBuf {
        self.root.join("domain_stats.jsonl")
    }
    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Reads the per-source output of an earlier stage, with the union in source
/// order and a cross-source id → source-index map.
fn read_stage_union(
    dirs: &CurateDirs,
    stage_dir: &str,
    names: &[&str],
) -> Result<(Vec<Vec<Document>>, HashMap<String, usize>)> {
    let mut per_source = Vec::with_capacity(names.len());
    let mut owner = HashMap::new();
    for (i, name) in names.iter().enumerate() {
        let docs = read_jsonl(&dirs.per_source(stage_dir, name))?;
        for d in &docs {
            if owner.insert(d.id.clone(), i).is_some() {
                return Err(Error::data(format!(
                    "document id `{}` appears in more than one source",
                    d.id
                )));
            }
        }
        per_source.push(docs);
    }
    Ok((per_source, owner))
}

pub fn cmd_curate(cfg: &LoadedConfig) -> Result<()> {
    let run = &cfg.run;
    // Validate every input before creating anything under the output dir.
    for s in &run.sources {
        let docs = read_jsonl(&s.path)?;
        if docs.is_empty() {
            return Err(Error::data(format!(
                "source `{}` ({}) holds no documents",
                s.name,
                s.path.display()
            )));
        }
    }
    let lexicon = Lexicon::from_file(&run.curate.lexicon)?;
    if lexicon.is_empty() {
        return Err(Error::data(format!(
            "lexicon {} holds no terms",
            run.curate.lexicon.display()
        )));
    }
    let blocklist = match &run.curate.blocklist {
        Some(p) => Lexicon::from_file(p)?,
        None => Lexicon::default(),
    };

    let _lock = DirLock::acquire(&run.output_dir)?;
    let dirs = CurateDirs::new(&run.output_dir);
    let names: Vec<&str> = run.sources.iter().map(|s| s.name.as_str()).collect();

    let filter = || -> Result<()> {
        let mut stats = Vec::new();
        for (i, s) in run.sources.iter().enumerate() {
            let docs = read_jsonl(&s.path)?;
            let lang = language_filter(&docs, run.curate.min_letter_ratio);
            let blocked = blocklist_filter(&lang, &blocklist);
            let sampled = match run.curate.sample_per_source {
                Some(n) => {
                    let mut rng = stream(run.seed, "sample", &[i as u64]);
                    reservoir_sample(&blocked, n, &mut rng)
                }
                None => blocked.clone(),
            };
            if sampled.is_empty() {
                return Err(Error::data(format!(
                    "source `{}`: every document was filtered out",
                    s.name
                )));
            }
            stats.push(FilterStat {
                source: s.name.clone(),
                input: docs.len(),
                after_language: lang.len(),
                after_blocklist: blocked.len(),
                after_sample: sampled.len(),
            });
            write_jsonl(&dirs.per_source("filtered", &s.name), &sampled)?;
        }
        write_jsonl(&dirs.filter_stats(), &stats)
    };

    let dedup_stage = || -> Result<()> {
        let (per_source, owner) = read_stage_union(&dirs, "filtered", &names)?;
        let union: Vec<Document> = per_source.iter().flatten().cloned().collect();
        let report = dedup(&union, run.curate.dedup_threshold, &run.curate.minhash)?;
        let kept: HashSet<&str> = report.retained.iter().map(|d| d.id.as_str()).collect();
        for (i, name) in names.iter().enumerate() {
            let docs: Vec<Document> = per_source[i]
                .iter()
                .filter(|d| kept.contains(d.id.as_str()))
                .cloned()
                .collect();
            if docs.is_empty() {
                return Err(Error::data(format!(
                    "source `{name}`: all documents were near-duplicates of earlier sources"
                )));
            }
            write_jsonl(&dirs.per_source("deduped", name), &docs)?;
        }
        let _ = owner; // ownership map only enforces cross-source id uniqueness
        write_json(&dirs.dedup_clusters(), &report.clusters)
    };

    let label = || -> Result<()> {
        for name in &names {
            let mut docs = read_jsonl(&dirs.per_source("deduped", name))?;
            for d in &mut docs {
                d.label = Some(label_oracle(&d.text, &lexicon));
            }
            write_jsonl(&dirs.per_source("labeled", name), &docs)?;
        }
        Ok(())
    };

    let classifier = || -> Result<()> {
        let (per_source, _) = read_stage_union(&dirs, "labeled", &names)?;
        let union: Vec<Document> = per_source.into_iter().flatten().collect();
        let mut hyper = run.curate.classifier;
        hyper.seed = derive_seed(run.seed, "classifier", &[]);
        let (clf, report) = train_classifier(&union, &hyper)?;
        write_json(&dirs.classifier(), &clf)?;
        write_json(&dirs.classifier_report(), &report)
    };

    let threshold = || -> Result<()> {
        let clf: NGramClassifier = read_json(&dirs.classifier())?;
        let (per_source, owner) = read_stage_union(&dirs, "labeled", &names)?;
        let union: Vec<Document> = per_source.iter().flatten().cloned().collect();
        let (thr, calibrated) = match run.curate.threshold {
            Some(t) => (t, false),
            None => (calibrate_threshold(&union, &clf)?, true),
        };
        let (retained, stats) = rexlab_core::corpus::threshold_filter(&union, &clf, thr)?;
        let mut buckets: Vec<Vec<Document>> = vec![Vec::new(); names.len()];
        for d in retained {
            buckets[owner[&d.id]].push(d);
        }
        for (i, name) in names.iter().enumerate() {
            if buckets[i].is_empty() {
                return Err(Error::data(format!(
                    "source `{name}`: no document scored above the threshold {thr}"
                )));
            }
            write_jsonl(&dirs.per_source("retained", name), &buckets[i])?;
        }
        write_jsonl(&dirs.domain_stats(), &stats)?;
        write_json(&dirs.threshold(), &ThresholdInfo { threshold: thr, calibrated })
    };

    let weights = || -> Result<()> {
        let mut sizes = Vec::with_capacity(names.len());
        for name in &names {
            sizes.push(read_jsonl(&dirs.per_source("retained", name))?.len());
        }
        let w = temperature_weights(&sizes, run.curate.temperature)?;
        let rows: Vec<SourceWeight> = names
            .iter()
            .zip(sizes.iter().zip(&w))
            .map(|(name, (&retained, &weight))| SourceWeight {
                name: (*name).to_string(),
                retained,
                weight,
            })
            .collect();
        write_json(&dirs.weights(), &rows)
    };

    let tokenizer = || -> Result<()> {
        let vocab = match &run.tokenizer.path {
            Some(p) => BpeVocab::load(p)?,
            None => {
                let mut texts = Vec::new();
                for name in &names {
                    for d in read_jsonl(&dirs.per_source("retained", name))? {
                        texts.push(d.text);
                    }
                }
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                train_bpe(&refs, run.tokenizer.vocab_size)?
            }
        };
        vocab.save(&dirs.vocab())
    };

    let tokenize = || -> Result<()> {
        let vocab = BpeVocab::load(&dirs.vocab())?;
        let tok_lexicon = TokenLexicon::build(&lexicon, &vocab);
        for name in &names {
            let docs = read_jsonl(&dirs.per_source("retained", name))?;
            let mut records = Vec::with_capacity(docs.len());
            for d in docs {
                let ids = vocab.encode(&d.text);
                if ids.is_empty() {
                    eprintln!("note: document `{}` tokenizes to nothing; skipped", d.id);
                    continue;
                }
                let spans = mine_guided_spans(&ids, &tok_lexicon).ranges().to_vec();
                records.push(TokensRecord { id: d.id, ids, spans });
            }
            if records.is_empty() {
                return Err(Error::data(format!("source `{name}`: nothing left to tokenize")));
            }
            write_jsonl(&dirs.per_source("tokens", name), &records)?;
        }
        Ok(())
    };

    let mut stages: Vec<(&str, Box<dyn FnMut() -> Result<()>>)> = vec![
        ("filter", Box::new(filter)),
        ("dedup", Box::new(dedup_stage)),
        ("label", Box::new(label)),
        ("classifier", Box::new(classifier)),
        ("threshold", Box::new(threshold)),
        ("weights", Box::new(weights)),
        ("tokenizer", Box::new(tokenizer)),
        ("tokenize", Box::new(tokenize)),
    ];
    let ran = run_stages(&dirs.root, &cfg.hash, &mut stages)?;
    for name in CURATE_STAGES {
        let status = if ran.contains(&name) { "ran" } else { "up to date" };
        println!("curate/{name}: {status}");
    }
    let weights: Vec<SourceWeight> = read_json(&dirs.weights())?;
    for w in &weights {
        println!("source {}: {} documents retained, mixture weight {:.4}", w.name, w.retained, w.weight);
    }
    Ok(())
}
