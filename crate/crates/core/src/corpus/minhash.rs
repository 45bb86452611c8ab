//! MinHash near-duplicate detection: per-document signatures over token
//! shingles, a matching-minima Jaccard estimator, and a greedy first-seen-wins
//! deduplication pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, splitmix64};

use super::{normalize_tokens, Document};

/// Signature parameters: `k` hash permutations over `w`-token shingles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinHashParams {
    pub k: usize,
    pub w: usize,
    pub seed: u64,
}

impl Default for MinHashParams {
    fn default() -> Self {
        MinHashParams { k: 256, w: 5, seed: 0x5eed_cafe_u64 }
    }
}

impl MinHashParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 16 {
            return Err(Error::config(format!("minhash k must be at least 16, got {}", self.k)));
        }
        if self.w < 2 {
            return Err(Error::config(format!("shingle width must be at least 2, got {}", self.w)));
        }
        Ok(())
    }
}

/// Per-permutation hash minima for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub minima: Vec<u64>,
    pub width: usize,
}

fn permutation_seeds(master: u64, k: usize) -> Vec<u64> {
    let mut state = master;
    (0..k).map(|_| splitmix64(&mut state)).collect()
}

/// splitmix64 finalizer, used to turn `shingle_hash ^ seed` into one
/// permutation's value.
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Builds the signature: minima of `k` hash permutations over the document's
/// `w`-token shingles. Documents shorter than `w` tokens contribute a single
/// whole-document shingle.
pub fn minhash_signature(text: &str, params: &MinHashParams) -> Result<MinHashSignature> {
    params.validate()?;
    let tokens = normalize_tokens(text);
    let mut shingle_hashes = Vec::new();
    if tokens.len() < params.w {
        shingle_hashes.push(fnv1a64(tokens.join("\u{1f}").as_bytes()));
    } else {
        for win in tokens.windows(params.w) {
            shingle_hashes.push(fnv1a64(win.join("\u{1f}").as_bytes()));
        }
    }
    let seeds = permutation_seeds(params.seed, params.k);
    let minima = seeds
        .iter()
        .map(|&s| shingle_hashes.iter().map(|&h| mix(h ^ s)).min().expect("at least one shingle"))
        .collect();
    Ok(MinHashSignature { minima, width: params.w })
}

/// Fraction of matching minima — an unbiased estimate of the shingle-set
/// Jaccard similarity.
pub fn jaccard_estimate(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64> {
    if a.minima.len() != b.minima.len() || a.width != b.width {
        return Err(Error::config(format!(
            "signatures disagree on parameters: k {} vs {}, w {} vs {}",
            a.minima.len(),
            b.minima.len(),
            a.width,
            b.width
        )));
    }
    let matches = a.minima.iter().zip(&b.minima).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.minima.len() as f64)
}

/// One retained document together with the near-duplicates dropped onto it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateCluster {
    pub kept: String,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupReport {
    pub retained: Vec<Document>,
    pub clusters: Vec<DuplicateCluster>,
}

/// Greedy first-seen-wins dedup in input order: a document is dropped iff its
/// estimated Jaccard with some already-retained document reaches `threshold`.
/// Signatures are computed in parallel; the greedy pass is sequential.
pub fn dedup(docs: &[Document], threshold: f64, params: &MinHashParams) -> Result<DedupReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!("dedup threshold must lie in (0, 1], got {threshold}")));
    }
    params.validate()?;
    let signatures: Vec<MinHashSignature> = docs
        .par_iter()
        .map(|d| minhash_signature(&d.text, params))
        .collect::<Result<_>>()?;

    let mut retained: Vec<Document> = Vec::new();
    let mut retained_sigs: Vec<&MinHashSignature> = Vec::new();
    let mut clusters: Vec<DuplicateCluster> = Vec::new();
    let mut cluster_of: Vec<Option<usize>> = Vec::new(); // per retained doc
    for (doc, sig) in docs.iter().zip(&signatures) {
        let mut dup_of = None;
        for (ri, rsig) in retained_sigs.iter().enumerate() {
            if jaccard_estimate(sig, rsig)? >= threshold {
                dup_of = Some(ri);
                break;
            }
        }
        match dup_of {
            Some(ri) => {
                let ci = *cluster_of[ri].get_or_insert_with(|| {
                    clusters.push(DuplicateCluster {
                        kept: retained[ri].id.clone(),
                        dropped: Vec::new(),
                    });
                    clusters.len() - 1
                });
                clusters[ci].dropped.push(doc.id.clone());
            }
            None => {
                retained.push(doc.clone());
                retained_sigs.push(sig);
                cluster_of.push(None);
            }
        }
    }
    Ok(DedupReport { retained, clusters })
}
