//! Relevance-classifier distillation: a deterministic lexicon-density oracle
//! stands in for an external labeler, and a hashed bag-of-n-grams logistic
//! regression learns to imitate it.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, stream};

use super::spans::Lexicon;
use super::{normalize_tokens, Document, Label};

/// Matches of lexicon terms per 100 tokens, using leftmost-longest
/// non-overlapping matching over normalized tokens.
pub fn term_density(text: &str, lexicon: &Lexicon) -> f64 {
    let tokens = normalize_tokens(text);
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = lexicon.count_matches(&tokens);
    100.0 * hits as f64 / tokens.len() as f64
}

/// Deterministic relevance rule: a document is `Relevant` iff it contains at
/// least 3 lexicon-term matches per 100 tokens.
pub fn label_oracle(text: &str, lexicon: &Lexicon) -> Label {
    if term_density(text, lexicon) >= 3.0 {
        Label::Relevant
    } else {
        Label::NotRelevant
    }
}

/// Training hyperparameters for the hashed-feature logistic regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierHyper {
    /// Feature buckets = 2^bits.
    pub bits: u32,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Include hashed bigrams in addition to unigrams.
    pub bigrams: bool,
    /// One in `holdout_mod` documents (by stable id hash) is held out.
    pub holdout_mod: u64,
    pub seed: u64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        ClassifierHyper {
            bits: 20,
            epochs: 8,
            lr: 0.5,
            l2: 1e-6,
            bigrams: true,
            holdout_mod: 5,
            seed: 7,
        }
    }
}

/// Logistic model over hashed uni(+bi)gram counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub bits: u32,
    pub bigrams: bool,
    pub hash_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_size: usize,
    pub holdout_size: usize,
    pub holdout_accuracy: Option<f64>,
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-30.0, 30.0)).exp())
}

/// Sparse raw-count features, sorted by bucket so accumulation order is fixed.
fn features(text: &str, bits: u32, bigrams: bool, hash_seed: u64) -> Vec<(u32, f64)> {
    let tokens = normalize_tokens(text);
    let mask = (1u64 << bits) - 1;
    let bucket = |s: &str| (mix(fnv1a64(s.as_bytes()) ^ hash_seed) & mask) as u32;
    let mut counts: HashMap<u32, f64> = HashMap::new();
    for t in &tokens {
        *counts.entry(bucket(t)).or_insert(0.0) += 1.0;
    }
    if bigrams {
        for pair in tokens.windows(2) {
            let joined = format!("{}\u{1f}{}", pair[0], pair[1]);
            *counts.entry(bucket(&joined)).or_insert(0.0) += 1.0;
        }
    }
    let mut feats: Vec<(u32, f64)> = counts.into_iter().collect();
    feats.sort_unstable_by_key(|&(b, _)| b);
    feats
}

fn raw_score(clf: &NGramClassifier, feats: &[(u32, f64)]) -> f64 {
    let mut z = clf.bias;
    for &(b, c) in feats {
        z += clf.weights[b as usize] * c;
    }
    z
}

/// Classifier probability that a document is relevant.
pub fn score_doc(clf: &NGramClassifier, text: &str) -> f64 {
    sigmoid(raw_score(clf, &features(text, clf.bits, clf.bigrams, clf.hash_seed)))
}

const HOLDOUT_SALT: u64 = 0x1d0c_5a1f;

fn is_holdout(id: &str, holdout_mod: u64) -> bool {
    holdout_mod > 1 && mix(fnv1a64(id.as_bytes()) ^ HOLDOUT_SALT) % holdout_mod == 0
}

/// Trains the logistic regression by shuffled SGD with per-epoch snapshot
/// averaging. All documents must carry labels; the train split (documents not
/// routed to the holdout by id hash) must contain both classes.
pub fn train_classifier(
    docs: &[Document],
    hyper: &ClassifierHyper,
) -> Result<(NGramClassifier, ClassifierReport)> {
    if hyper.bits == 0 || hyper.bits > 26 {
        return Err(Error::config(format!("classifier bits must lie in 1..=26, got {}", hyper.bits)));
    }
    if hyper.epochs == 0 || hyper.lr <= 0.0 {
        return Err(Error::config("classifier needs epochs > 0 and lr > 0"));
    }
    let hash_seed = mix(hyper.seed ^ 0xfea7);
    let mut train: Vec<(Vec<(u32, f64)>, f64)> = Vec::new();
    let mut holdout: Vec<(Vec<(u32, f64)>, f64)> = Vec::new();
    for doc in docs {
        let label = doc.label.ok_or_else(|| {
            Error::config(format!("document `{}` reached the trainer without a label", doc.id))
        })?;
        let y = if label == Label::Relevant { 1.0 } else { 0.0 };
        let feats = features(&doc.text, hyper.bits, hyper.bigrams, hash_seed);
        if is_holdout(&doc.id, hyper.holdout_mod) {
            holdout.push((feats, y));
        } else {
            train.push((feats, y));
        }
    }
    let positives = train.iter().filter(|(_, y)| *y == 1.0).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::config(format!(
            "training split needs both classes, got {positives} positives out of {}",
            train.len()
        )));
    }

    let dim = 1usize << hyper.bits;
    let mut clf = NGramClassifier {
        weights: vec![0.0; dim],
        bias: 0.0,
        bits: hyper.bits,
        bigrams: hyper.bigrams,
        hash_seed,
    };
    let mut weight_sum = vec![0.0f64; dim];
    let mut bias_sum = 0.0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hyper.epochs {
        let mut rng = stream(hyper.seed, "clf-shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        let lr_t = hyper.lr / (1.0 + 0.5 * epoch as f64);
        for &i in &order {
            let (feats, y) = &train[i];
            let p = sigmoid(raw_score(&clf, feats));
            let g = p - y;
            for &(b, c) in feats {
                let w = &mut clf.weights[b as usize];
                *w -= lr_t * (g * c + hyper.l2 * *w);
            }
            clf.bias -= lr_t * g;
        }
        for (s, w) in weight_sum.iter_mut().zip(&clf.weights) {
            *s += w;
        }
        bias_sum += clf.bias;
    }
    for (w, s) in clf.weights.iter_mut().zip(&weight_sum) {
        *w = s / hyper.epochs as f64;
    }
    clf.bias = bias_sum / hyper.epochs as f64;

    let holdout_accuracy = if holdout.is_empty() {
        None
    } else {
        let correct = holdout
            .iter()
            .filter(|(f, y)| (sigmoid(raw_score(&clf, f)) >= 0.5) == (*y == 1.0))
            .count();
        Some(correct as f64 / holdout.len() as f64)
    };
    let report = ClassifierReport {
        train_size: train.len(),
        holdout_size: holdout.len(),
        holdout_accuracy,
    };
    Ok((clf, report))
}
