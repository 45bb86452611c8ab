//! Gazetteer guided-span mining: a term list is matched against documents in
//! token-id space with a leftmost-longest greedy rule, yielding spans the
//! masker can treat as whole units.

use std::path::Path;

use crate::error::Result;
use crate::masking::GuidedSpans;
use crate::TokenId;

use super::bpe::BpeVocab;
use super::normalize_tokens;

/// A term list. Each entry keeps its raw form (for tokenizer encoding) and
/// its normalized token form (for density counting).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    raw: Vec<String>,
    tokens: Vec<Vec<String>>,
}

impl Lexicon {
    /// Builds a lexicon, dropping entries with no alphanumeric content and
    /// duplicates (by normalized form, first occurrence wins).
    pub fn new(terms: &[&str]) -> Self {
        let mut raw = Vec::new();
        let mut tokens: Vec<Vec<String>> = Vec::new();
        for t in terms {
            let norm = normalize_tokens(t);
            if norm.is_empty() || tokens.contains(&norm) {
                continue;
            }
            raw.push(t.to_string());
            tokens.push(norm);
        }
        Lexicon { raw, tokens }
    }

    /// Loads one term per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let terms: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Ok(Lexicon::new(&terms))
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn raw_terms(&self) -> &[String] {
        &self.raw
    }

    /// Number of leftmost-longest non-overlapping term matches in a
    /// normalized token sequence.
    pub fn count_matches(&self, tokens: &[String]) -> usize {
        greedy_leftmost_longest(tokens, &self.tokens).len()
    }
}

/// At each position take the longest pattern match, then continue after it.
fn greedy_leftmost_longest<T: PartialEq>(hay: &[T], patterns: &[Vec<T>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < hay.len() {
        let mut best = 0;
        for p in patterns {
            if p.len() > best && i + p.len() <= hay.len() && hay[i..i + p.len()] == p[..] {
                best = p.len();
            }
        }
        if best > 0 {
            out.push((i, i + best));
            i += best;
        } else {
            i += 1;
        }
    }
    out
}

/// The lexicon carried into token-id space by a fixed tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLexicon {
    patterns: Vec<Vec<TokenId>>,
}

impl TokenLexicon {
    pub fn build(lexicon: &Lexicon, vocab: &BpeVocab) -> Self {
        let mut patterns: Vec<Vec<TokenId>> = Vec::new();
        for term in lexicon.raw_terms() {
            let ids = vocab.encode(term);
            if !ids.is_empty() && !patterns.contains(&ids) {
                patterns.push(ids);
            }
        }
        TokenLexicon { patterns }
    }

    pub fn patterns(&self) -> &[Vec<TokenId>] {
        &self.patterns
    }
}

/// Mines guided spans from an encoded document: longest-match-first,
/// non-overlapping token ranges covering gazetteer hits.
pub fn mine_guided_spans(ids: &[TokenId], lexicon: &TokenLexicon) -> GuidedSpans {
    GuidedSpans::new(greedy_leftmost_longest(ids, &lexicon.patterns))
}

/// Reference matcher: enumerate every (start, pattern) match, order by start
/// ascending then length descending, and keep non-overlapping matches.
pub fn mine_guided_spans_bruteforce(ids: &[TokenId], lexicon: &TokenLexicon) -> GuidedSpans {
    let mut matches: Vec<(usize, usize)> = Vec::new();
    for p in &lexicon.patterns {
        if p.is_empty() {
            continue;
        }
        for start in 0..ids.len().saturating_sub(p.len() - 1) {
            if ids[start..start + p.len()] == p[..] {
                matches.push((start, start + p.len()));
            }
        }
    }
    matches.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for (s, e) in matches {
        if taken.last().map_or(true, |&(_, le)| s >= le) {
            taken.push((s, e));
        }
    }
    GuidedSpans::new(taken)
}
