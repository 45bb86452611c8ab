//! Byte-level BPE tokenizer. Texts are pre-split into alternating
//! whitespace / non-whitespace byte runs; merges never cross run boundaries,
//! and every byte has a base token, so decode(encode(x)) == x for any input.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::TokenId;

/// Reserved token ids. Base byte tokens follow at `5 + byte`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub mask: TokenId,
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
}

pub const SPECIALS: SpecialTokens =
    SpecialTokens { mask: 0, pad: 1, unk: 2, cls: 3, sep: 4 };

const SPECIAL_NAMES: [&str; 5] = ["<mask>", "<pad>", "<unk>", "<cls>", "<sep>"];

/// Number of reserved + byte tokens; merge products start here.
pub const BASE_VOCAB: usize = 5 + 256;

/// Token table plus the ordered merge rules that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    rank: HashMap<(TokenId, TokenId), (u32, TokenId)>,
}

fn base_tokens() -> Vec<Vec<u8>> {
    let mut tokens: Vec<Vec<u8>> =
        SPECIAL_NAMES.iter().map(|n| n.as_bytes().to_vec()).collect();
    for b in 0..=255u8 {
        tokens.push(vec![b]);
    }
    tokens
}

/// Splits into maximal runs of whitespace or non-whitespace bytes; their
/// concatenation is the original input.
fn byte_runs(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut runs = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let ws = bytes[start].is_ascii_whitespace();
        let mut end = start + 1;
        while end < bytes.len() && bytes[end].is_ascii_whitespace() == ws {
            end += 1;
        }
        runs.push(&bytes[start..end]);
        start = end;
    }
    runs
}

/// Trains a BPE vocabulary by greedy highest-frequency pair merging. Ties go
/// to the numerically smallest pair. Stops early (with a warning on stderr)
/// once no pair occurs at least twice.
pub fn train_bpe(texts: &[&str], vocab_size: usize) -> Result<BpeVocab> {
    if vocab_size <= BASE_VOCAB {
        return Err(Error::config(format!(
            "vocab_size must exceed the {BASE_VOCAB} reserved + byte tokens, got {vocab_size}"
        )));
    }
    // Word multiset in first-encounter order, as base token ids.
    let mut counts: IndexMap<Vec<TokenId>, u64> = IndexMap::new();
    for text in texts {
        for run in byte_runs(text) {
            let word: Vec<TokenId> = run.iter().map(|&b| 5 + b as TokenId).collect();
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = counts.into_iter().collect();

    let mut tokens = base_tokens();
    let mut merges = Vec::new();
    let mut rank = HashMap::new();
    while tokens.len() < vocab_size {
        let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (word, n) in &words {
            for pair in word.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_insert(0) += n;
            }
        }
        let mut best: Option<((TokenId, TokenId), u64)> = None;
        for (&pair, &n) in &pair_counts {
            let better = match best {
                None => true,
                Some((bp, bn)) => n > bn || (n == bn && pair < bp),
            };
            if better {
                best = Some((pair, n));
            }
        }
        let Some((pair, n)) = best else { break };
        if n < 2 {
            break;
        }
        let new_id = tokens.len() as TokenId;
        let merged = [tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone()].concat();
        tokens.push(merged);
        rank.insert(pair, (merges.len() as u32, new_id));
        merges.push(pair);
        for (word, _) in &mut words {
            apply_merge(word, pair, new_id);
        }
    }
    if tokens.len() < vocab_size {
        eprintln!(
            "warning: corpus only supports {} of the requested {} vocabulary tokens",
            tokens.len(),
            vocab_size
        );
    }
    Ok(BpeVocab { tokens, merges, rank })
}

/// Replaces every left-to-right occurrence of `pair` with `new_id` in place.
fn apply_merge(word: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl BpeVocab {
    pub fn specials(&self) -> SpecialTokens {
        SPECIALS
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|v| v.as_slice())
    }

    /// Encodes text to token ids; merges apply per run, lowest rank first.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for run in byte_runs(text) {
            let mut word: Vec<TokenId> = run.iter().map(|&b| 5 + b as TokenId).collect();
            loop {
                let mut best: Option<(u32, (TokenId, TokenId), TokenId)> = None;
                for pair in word.windows(2) {
                    if let Some(&(r, new_id)) = self.rank.get(&(pair[0], pair[1])) {
                        if best.map_or(true, |(br, _, _)| r < br) {
                            best = Some((r, (pair[0], pair[1]), new_id));
                        }
                    }
                }
                match best {
                    Some((_, pair, new_id)) => apply_merge(&mut word, pair, new_id),
                    None => break,
                }
            }
            out.extend_from_slice(&word);
        }
        out
    }

    /// Decodes ids back to text. Special tokens are skipped; out-of-range ids
    /// or byte sequences that are not valid UTF-8 are data errors.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if (id as usize) >= self.tokens.len() {
                return Err(Error::data(format!(
                    "token id {id} out of range for vocab of {}",
                    self.tokens.len()
                )));
            }
            if id >= 5 {
                bytes.extend_from_slice(&self.tokens[id as usize]);
            }
        }
        String::from_utf8(bytes)
            .map_err(|e| Error::data(format!("decoded bytes are not valid UTF-8: {e}")))
    }

    /// Writes the token table and ordered merges as a text file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = String::new();
        out.push_str("bpe-vocab v1\n");
        out.push_str(&format!("tokens {}\n", self.tokens.len()));
        for (id, bytes) in self.tokens.iter().enumerate() {
            if id < 5 {
                out.push_str(&format!("{id} {}\n", SPECIAL_NAMES[id]));
            } else {
                out.push_str(&format!("{id} {}\n", hex::encode(bytes)));
            }
        }
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for &(l, r) in &self.merges {
            out.push_str(&format!("{l} {r}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a vocabulary saved by [`BpeVocab::save`], verifying that the
    /// stored token table matches what the merges reconstruct.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
        if lines.next() != Some("bpe-vocab v1") {
            return Err(bad("missing `bpe-vocab v1` header"));
        }
        let n_tokens: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("tokens "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing token count"))?;
        if n_tokens < BASE_VOCAB {
            return Err(bad("token table smaller than the reserved + byte base"));
        }
        let mut stored: Vec<Vec<u8>> = Vec::with_capacity(n_tokens);
        for i in 0..n_tokens {
            let line = lines.next().ok_or_else(|| bad("truncated token table"))?;
            let (id_str, payload) =
                line.split_once(' ').ok_or_else(|| bad("malformed token line"))?;
            if id_str.parse::<usize>().ok() != Some(i) {
                return Err(bad("token ids must be dense and in order"));
            }
            if i < 5 {
                if payload != SPECIAL_NAMES[i] {
                    return Err(bad("unexpected special token name"));
                }
                stored.push(payload.as_bytes().to_vec());
            } else {
                stored.push(
                    hex::decode(payload).map_err(|_| bad("invalid hex in token table"))?,
                );
            }
        }
        let n_merges: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing merge count"))?;
        if BASE_VOCAB + n_merges != n_tokens {
            return Err(bad("token count does not equal base vocab plus merges"));
        }
        let mut tokens = base_tokens();
        let mut merges = Vec::with_capacity(n_merges);
        let mut rank = HashMap::new();
        for m in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merge list"))?;
            let (l_str, r_str) =
                line.split_once(' ').ok_or_else(|| bad("malformed merge line"))?;
            let l: TokenId = l_str.parse().map_err(|_| bad("invalid merge id"))?;
            let r: TokenId = r_str.parse().map_err(|_| bad("invalid merge id"))?;
            let new_id = tokens.len() as TokenId;
            if (l as usize) >= tokens.len() || (r as usize) >= tokens.len() {
                return Err(bad("merge references a token that does not exist yet"));
            }
            let merged = [tokens[l as usize].clone(), tokens[r as usize].clone()].concat();
            tokens.push(merged);
            rank.insert((l, r), (m as u32, new_id));
            merges.push((l, r));
        }
        for (i, (a, b)) in tokens.iter().zip(&stored).enumerate() {
            if a != b {
                return Err(bad(&format!(
                    "token {i} in the table disagrees with its merge reconstruction"
                )));
            }
        }
        Ok(BpeVocab { tokens, merges, rank })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_merge_on_repeated_symbol_is_that_pair() {
        let vocab = train_bpe(&["aaaaaaaa"], BASE_VOCAB + 3).unwrap();
        let a = 5 + b'a' as TokenId;
        assert_eq!(vocab.merges()[0], (a, a));
        assert_eq!(vocab.token_bytes(BASE_VOCAB as TokenId).unwrap(), b"aa");
    }

    #[test]
    fn roundtrip_on_fixtures() {
        let vocab = train_bpe(&["the quick brown fox the quick"], BASE_VOCAB + 20).unwrap();
        for s in [
            "",
            "hello world",
            "héllo wörld",
            "🦀 crates and 🚀 rockets",
            "商品の説明テキスト",
            "  tabs\tand\nnewlines  ",
            "the quick brown fox",
        ] {
            assert_eq!(vocab.decode(&vocab.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn roundtrip_on_random_utf8() {
        let vocab = train_bpe(&["some seed corpus for merges merges"], BASE_VOCAB + 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let len = rng.gen_range(0..64);
            let s: String = (0..len)
                .map(|_| loop {
                    if let Some(c) = char::from_u32(rng.gen_range(0..0x11_0000)) {
                        return c;
                    }
                })
                .collect();
            assert_eq!(vocab.decode(&vocab.encode(&s)).unwrap(), s);
        }
    }

    /// Reference trainer: recompute pair counts from scratch each round with
    /// an independent scan and assert the same merge sequence.
    #[test]
    fn merge_order_matches_pair_count_oracle() {
        let corpus = ["low low low lower lower newest newest newest newest widest widest"];
        let target = BASE_VOCAB + 12;
        let vocab = train_bpe(&corpus, target).unwrap();

        let mut words: Vec<Vec<TokenId>> = Vec::new();
        for t in &corpus {
            for run in byte_runs(t) {
                words.push(run.iter().map(|&b| 5 + b as TokenId).collect());
            }
        }
        let mut next_id = BASE_VOCAB as TokenId;
        for &(el, er) in vocab.merges() {
            let mut counts: std::collections::BTreeMap<(TokenId, TokenId), u64> =
                std::collections::BTreeMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_insert(0) += 1;
                }
            }
            // BTreeMap iterates in ascending pair order, so `>` keeps the
            // smallest pair among equal counts.
            let (&best_pair, &best_n) =
                counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
            assert!(best_n >= 2);
            assert_eq!((el, er), best_pair);
            for w in &mut words {
                apply_merge(w, best_pair, next_id);
            }
            next_id += 1;
        }
        assert_eq!(vocab.vocab_size(), target);
    }

    #[test]
    fn stops_early_when_no_pair_repeats() {
        let vocab = train_bpe(&["ab"], 300).unwrap();
        assert_eq!(vocab.vocab_size(), BASE_VOCAB);
        assert!(vocab.merges().is_empty());
    }

    #[test]
    fn vocab_size_must_exceed_base() {
        assert!(train_bpe(&["abc"], 100).is_err());
    }

    #[test]
    fn save_load_roundtrip_preserves_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab =
            train_bpe(&["repeat repeat repeated tokens tokens tokens"], BASE_VOCAB + 15).unwrap();
        vocab.save(&path).unwrap();
        let loaded = BpeVocab::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        let s = "repeat the repeated tokens";
        assert_eq!(vocab.encode(s), loaded.encode(s));
    }

    #[test]
    fn tampered_token_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = train_bpe(&["aaaa aaaa"], BASE_VOCAB + 2).unwrap();
        vocab.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("6161", "6262");
        std::fs::write(&path, tampered).unwrap();
        assert!(BpeVocab::load(&path).is_err());
    }

    #[test]
    fn special_ids_are_pinned() {
        let s = SPECIALS;
        assert_eq!(
            (s.mask, s.pad, s.unk, s.cls, s.sep),
            (0, 1, 2, 3, 4)
        );
    }
}
