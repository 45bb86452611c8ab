//! Filtering and sampling stages around the classifier: language and
//! blocklist filters, score thresholding with per-domain stats, threshold
//! calibration against oracle labels, temperature-weighted source sampling,
//! and uniform reservoir sampling.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::classifier::{score_doc, NGramClassifier};
use super::spans::Lexicon;
use super::{normalize_tokens, Document, Label};

/// Fraction of non-whitespace characters that are ASCII letters.
pub fn ascii_letter_ratio(text: &str) -> f64 {
    let mut letters = 0usize;
    let mut total = 0usize;
    for ch in text.chars() {
        if ch.is_whitespace() {
            continue;
        }
        total += 1;
        if ch.is_ascii_alphabetic() {
            letters += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        letters as f64 / total as f64
    }
}

/// Keeps documents whose ASCII-letter ratio reaches `min_ratio` (0.9 is the
/// pipeline default).
pub fn language_filter(docs: &[Document], min_ratio: f64) -> Vec<Document> {
    docs.iter().filter(|d| ascii_letter_ratio(&d.text) >= min_ratio).cloned().collect()
}

/// Drops documents containing any blocked term (leftmost-longest token
/// matching, same as the oracle). An empty blocklist keeps everything.
pub fn blocklist_filter(docs: &[Document], blocklist: &Lexicon) -> Vec<Document> {
    if blocklist.is_empty() {
        return docs.to_vec();
    }
    docs.iter()
        .filter(|d| blocklist.count_matches(&normalize_tokens(&d.text)) == 0)
        .cloned()
        .collect()
}

/// Per-domain retention counts for one filtering stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStat {
    pub domain: String,
    pub input: usize,
    pub retained: usize,
    pub fraction: f64,
}

fn domain_stats(input: &[Document], retained: &[Document]) -> Vec<DomainStat> {
    let mut counts: IndexMap<String, (usize, usize)> = IndexMap::new();
    for d in input {
        counts.entry(d.domain.clone()).or_insert((0, 0)).0 += 1;
    }
    for d in retained {
        counts.entry(d.domain.clone()).or_insert((0, 0)).1 += 1;
    }
    counts
        .into_iter()
        .map(|(domain, (input, retained))| DomainStat {
            domain,
            input,
            retained,
            fraction: if input == 0 { 0.0 } else { retained as f64 / input as f64 },
        })
        .collect()
}

/// Scores every document (in parallel, deterministic) and keeps those with
/// score ≥ threshold. Retained documents carry their score.
pub fn threshold_filter(
    docs: &[Document],
    clf: &NGramClassifier,
    threshold: f64,
) -> Result<(Vec<Document>, Vec<DomainStat>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("score threshold must lie in [0, 1], got {threshold}")));
    }
    let scores: Vec<f64> = docs.par_iter().map(|d| score_doc(clf, &d.text)).collect();
    let retained: Vec<Document> = docs
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= threshold)
        .map(|(d, &s)| Document { score: Some(s), ..d.clone() })
        .collect();
    let stats = domain_stats(docs, &retained);
    Ok((retained, stats))
}

/// Picks the score threshold that maximizes F1 against the documents' labels
/// (candidates are the observed scores; ties prefer the lower threshold, which
/// retains more).
pub fn calibrate_threshold(docs: &[Document], clf: &NGramClassifier) -> Result<f64> {
    let mut labeled: Vec<(f64, bool)> = Vec::new();
    for d in docs {
        let label = d.label.ok_or_else(|| {
            Error::config(format!("document `{}` has no label to calibrate against", d.id))
        })?;
        labeled.push((score_doc(clf, &d.text), label == Label::Relevant));
    }
    let total_pos = labeled.iter().filter(|(_, y)| *y).count();
    if total_pos == 0 || total_pos == labeled.len() {
        return Err(Error::config("calibration needs both classes present"));
    }
    let mut candidates: Vec<f64> = labeled.iter().map(|(s, _)| *s).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &candidates {
        let tp = labeled.iter().filter(|&&(s, y)| s >= t && y).count();
        let fp = labeled.iter().filter(|&&(s, y)| s >= t && !y).count();
        if tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos as f64;
        let f1 = 2.0 * precision * recall / (precision + recall);
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

/// Source-mixture weights `w_i ∝ size_i^(1/T)`, normalized to sum to one.
/// T = 1 reproduces size-proportional sampling; large T flattens to uniform.
pub fn temperature_weights(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::config("temperature weights need at least one source"));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::config("source sizes must be positive"));
    }
    if temperature <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let powered: Vec<f64> = sizes.iter().map(|&s| (s as f64).powf(1.0 / temperature)).collect();
    let sum: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|p| p / sum).collect())
}

/// Uniform sample of `n` documents without replacement (reservoir algorithm);
/// output preserves input order.
pub fn reservoir_sample(docs: &[Document], n: usize, rng: &mut ChaCha8Rng) -> Vec<Document> {
    if docs.len() <= n {
        return docs.to_vec();
    }
    let mut picked: Vec<usize> = (0..n).collect();
    for i in n..docs.len() {
        let j = rng.gen_range(0..=i);
        if j < n {
            picked[j] = i;
        }
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| docs[i].clone()).collect()
}
