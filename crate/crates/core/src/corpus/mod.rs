//! Corpus curation pipeline: document ingestion, byte-level BPE tokenizer
//! training, MinHash near-duplicate removal, relevance-classifier distillation
//! from a deterministic labeling oracle, per-domain threshold filtering,
//! temperature-weighted source sampling, and gazetteer guided-span mining.

mod bpe;
mod classifier;
mod minhash;
mod pipeline;
mod spans;

pub use bpe::{train_bpe, BpeVocab, SpecialTokens, BASE_VOCAB, SPECIALS};
pub use classifier::{
    label_oracle, score_doc, term_density, train_classifier, ClassifierHyper, ClassifierReport,
    NGramClassifier,
};
pub use minhash::{
    dedup, jaccard_estimate, minhash_signature, DedupReport, DuplicateCluster, MinHashParams,
    MinHashSignature,
};
pub use pipeline::{
    ascii_letter_ratio, blocklist_filter, calibrate_threshold, language_filter, reservoir_sample,
    temperature_weights, threshold_filter, DomainStat,
};
pub use spans::{mine_guided_spans, mine_guided_spans_bruteforce, Lexicon, TokenLexicon};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary relevance label attached to a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Relevant,
    NotRelevant,
}

/// One corpus record: an id, a source-domain tag, the text, and optional
/// label/score produced by the pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub domain: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Document {
    pub fn new(id: impl Into<String>, domain: impl Into<String>, text: impl Into<String>) -> Self {
        Document { id: id.into(), domain: domain.into(), text: text.into(), label: None, score: None }
    }

    /// A document must carry an id and text that survives whitespace trimming.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::data("document with empty id"));
        }
        if self.text.trim().is_empty() {
            return Err(Error::data(format!("document `{}` has empty text", self.id)));
        }
        Ok(())
    }
}

/// Lowercased maximal alphanumeric runs — the token view shared by the
/// deduplicator, the oracle, and the classifier features.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Reads a line-delimited JSON shard of documents, validating each record and
/// rejecting duplicate ids within the shard.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut docs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}:{}: malformed record: {e}", path.display(), lineno + 1))
        })?;
        doc.validate()?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::data(format!(
                "{}:{}: duplicate document id `{}`",
                path.display(),
                lineno + 1,
                doc.id
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes records as line-delimited JSON, one per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(Error::from)?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
