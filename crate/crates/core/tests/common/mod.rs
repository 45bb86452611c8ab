//! Shared synthetic-data builders and the pass/fail reporter used by the
//! acceptance suite.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rexlab_core::corpus::{Document, Label};
use rexlab_core::eval::{EsciLabel, SimilarityPair};
use rexlab_core::rng::stream;

/// Collects sub-check failures for one acceptance criterion and prints a
/// single `[PASS]`/`[FAIL]` line when finished (visible with `--nocapture`).
pub struct Criterion {
    name: &'static str,
    fails: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    pub fn new(name: &'static str) -> Self {
        Criterion { name, fails: Vec::new(), notes: Vec::new() }
    }

    /// Records a failed sub-check when `ok` is false.
    pub fn check(&mut self, ok: bool, what: impl std::fmt::Display) {
        if !ok {
            self.fails.push(what.to_string());
        }
    }

    /// Adds a measurement to the summary shown on the verdict line.
    pub fn note(&mut self, what: impl std::fmt::Display) {
        self.notes.push(what.to_string());
    }

    /// Prints the verdict line and panics if any sub-check failed.
    pub fn finish(self) {
        if self.fails.is_empty() {
            println!("[PASS] {}: {}", self.name, self.notes.join("; "));
        } else {
            println!("[FAIL] {}: {}", self.name, self.fails.join("; "));
            panic!("{} failed: {}", self.name, self.fails.join("; "));
        }
    }
}

/// Two texts whose 5-word shingle sets have an exact known Jaccard overlap:
/// a shared prefix of `c` unique words plus per-text unique suffixes of `s`
/// words gives `c − 4` shared shingles out of `c + s − 4` per text, so
/// `J = (c − 4) / (c + 2s − 4)`. `(c, s) = (24, 10)` yields exactly 0.5.
pub fn jaccard_half_pair(pair_idx: usize) -> (String, String) {
    let (c, s) = (24usize, 10usize);
    let prefix: Vec<String> = (0..c).map(|j| format!("q{pair_idx}c{j}")).collect();
    let mk = |tag: &str| {
        let mut words = prefix.clone();
        words.extend((0..s).map(|j| format!("{tag}{pair_idx}u{j}")));
        words.join(" ")
    };
    (mk("left"), mk("right"))
}

pub const KITCHEN_TERMS: [&str; 10] = [
    "carafe", "griddle", "ladle", "saucepan", "trivet", "peeler", "grater", "colander", "pitcher",
    "tumbler",
];
pub const WEATHER_TERMS: [&str; 10] = [
    "glacier", "fjord", "tundra", "monsoon", "isobar", "typhoon", "drizzle", "cyclone", "thermal",
    "austral",
];
pub const FILLER_WORDS: [&str; 6] = ["the", "and", "with", "for", "this", "that"];

/// Labeled documents from two cleanly separated topics that share only filler
/// words, alternating labels; an n-gram model can tell them apart easily.
pub fn separable_corpus(n: usize, rng: &mut ChaCha8Rng) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let relevant = i % 2 == 0;
            let topic: &[&str] = if relevant { &KITCHEN_TERMS } else { &WEATHER_TERMS };
            let len = rng.gen_range(20..40);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        *topic.choose(rng).unwrap()
                    } else {
                        *FILLER_WORDS.choose(rng).unwrap()
                    }
                })
                .collect();
            let mut d = Document::new(format!("sep{i}"), "synthetic", words.join(" "));
            d.label = Some(if relevant { Label::Relevant } else { Label::NotRelevant });
            d
        })
        .collect()
}

/// Documents that blend the two topics in a proportion that sweeps from all
/// second-topic to all first-topic across the collection, so a trained topic
/// classifier spreads its scores over the whole (0, 1) range instead of
/// saturating at the extremes.
pub fn blended_corpus(n: usize, rng: &mut ChaCha8Rng) -> Vec<Document> {
    let len = 30usize;
    (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            let first = (frac * len as f64).round() as usize;
            let mut words: Vec<&str> = (0..len)
                .map(|j| {
                    let topic: &[&str] = if j < first { &KITCHEN_TERMS } else { &WEATHER_TERMS };
                    *topic.choose(rng).unwrap()
                })
                .collect();
            words.shuffle(rng);
            Document::new(format!("blend{i}"), "synthetic", words.join(" "))
        })
        .collect()
}

/// Documents of `len` unique words each, sharing no shingles with any other
/// document (used as distinct non-duplicate background for dedup tests).
pub fn unique_docs(n: usize, len: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let words: Vec<String> = (0..len).map(|j| format!("b{i}w{j}")).collect();
            Document::new(format!("base{i}"), "synthetic", words.join(" "))
        })
        .collect()
}

const CATALOG_POOL: [&str; 37] = [
    "kettle", "copper", "whisk", "skillet", "toaster", "apron", "spatula", "mixer", "scale",
    "thermos", "board", "sieve", "masher", "juicer", "opener", "timer", "rack", "steamer",
    "roaster", "basket", "cleaver", "parer", "funnel", "molds", "press", "shaker", "tongs",
    "mortar", "pestle", "ricer", "zester", "mandolin", "skewer", "ramekin", "cloche", "brazier",
    "trussing",
];

/// A small catalog of distinct documents, each a 7-word line (a unique item
/// code plus 6 pool words) repeated 8 times, so any masked span can be read
/// off another copy inside the same context window.
pub fn catalog_docs(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let mut words = vec![format!("sku{i:02}")];
            words.extend((0..6).map(|j| CATALOG_POOL[(i * 5 + j * 7) % 37].to_string()));
            let line = words.join(" ");
            vec![line; 8].join(" ")
        })
        .collect()
}

pub const GENERAL_POOL: [&str; 24] = [
    "amber", "birch", "cedar", "dune", "ember", "fern", "grove", "heath", "iris", "jade", "kelp",
    "larch", "maple", "nettle", "oak", "pine", "quartz", "reed", "sage", "thorn", "umber", "vine",
    "willow", "yarrow",
];
pub const DOMAIN_POOL: [&str; 24] = [
    "anode", "busbar", "cathode", "dynamo", "eddy", "ferrite", "gasket", "hysteresis", "impeller",
    "joule", "klystron", "lumen", "magnetron", "nozzle", "ohm", "piston", "quench", "rotor",
    "stator", "torque", "unipolar", "varistor", "winding", "yoke",
];

/// `count` fixed 5-word sentences drawn from `pool` under a named stream.
pub fn fixed_sentences(pool: &[&str], count: usize, seed: u64, label: &str) -> Vec<String> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, label, &[i as u64]);
            (0..5).map(|_| *pool.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// One document per rotation of the sentence list, so every document of a
/// family shares the same sentence inventory but no two are identical.
pub fn rotated_docs(sentences: &[String]) -> Vec<String> {
    (0..sentences.len())
        .map(|rot| {
            let mut parts: Vec<&str> = Vec::with_capacity(sentences.len());
            for k in 0..sentences.len() {
                parts.push(&sentences[(rot + k) % sentences.len()]);
            }
            parts.join(" ")
        })
        .collect()
}

const CONTENT_POOL: [&str; 40] = [
    "lantern", "compass", "satchel", "goggles", "paddle", "tripod", "beacon", "visor", "flask",
    "gaiter", "crampon", "puffer", "bivouac", "piton", "quiver", "ratchet", "sextant", "tiller",
    "anchor", "bobbin", "chisel", "dibber", "easel", "ferrule", "gimlet", "hacksaw", "jigsaw",
    "keel", "loupe", "mallet", "nipper", "outrigger", "plumb", "quoin", "rasp", "sander",
    "trowel", "vise", "winch", "yardarm",
];
const DECOY_POOL: [&str; 20] = [
    "sonata", "ballad", "minuet", "rondo", "etude", "cadenza", "prelude", "nocturne", "scherzo",
    "gavotte", "fugue", "madrigal", "aria", "chorale", "toccata", "pavane", "gigue", "lament",
    "anthem", "refrain",
];
/// Graded query/product pairs: each distinct query holds 3 content words and
/// gets one pair per relevance grade whose title keeps 3 / 2 / 1 / 0 of them,
/// topped up with decoys, so lexical overlap tracks the grade exactly. Every
/// title of a query then repeats that product's code word many times; the
/// code's arbitrary embedding geometry shifts all four cosines of a query
/// together at initialization, scrambling pooled rank order until a tuned
/// encoder learns to set the codes aside.
pub fn graded_pairs(num_queries: usize, rng: &mut ChaCha8Rng) -> Vec<SimilarityPair> {
    const CODE_COPIES: usize = 18;
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(num_queries * 4);
    let mut sku = 0usize;
    while seen.len() < num_queries {
        let mut picks: Vec<usize> = (0..CONTENT_POOL.len()).collect();
        picks.shuffle(rng);
        let q: Vec<&str> = picks[..3].iter().map(|&i| CONTENT_POOL[i]).collect();
        let query = q.join(" ");
        if !seen.insert(query.clone()) {
            continue;
        }
        let code = format!("zb{sku}");
        sku += 1;
        let mut decoys: Vec<&str> = DECOY_POOL.to_vec();
        decoys.shuffle(rng);
        for (label, keep) in [
            (EsciLabel::Exact, 3usize),
            (EsciLabel::Substitute, 2),
            (EsciLabel::Complement, 1),
            (EsciLabel::Irrelevant, 0),
        ] {
            let mut title_words: Vec<String> =
                q[..keep].iter().map(|w| w.to_string()).collect();
            title_words.extend(decoys[..3 - keep].iter().map(|w| w.to_string()));
            title_words.extend(std::iter::repeat(code.clone()).take(CODE_COPIES));
            let title = title_words.join(" ");
            pairs.push(SimilarityPair { query: query.clone(), title, description: None, label });
        }
    }
    pairs
}

/// Mirrors the dev-split rule used by the similarity fine-tuner: a stable
/// hash of the query sends about one query in ten to the dev side.
pub fn in_dev_split(query: &str) -> bool {
    fn fnv1a64(bytes: &[u8]) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
    fn mix(mut x: u64) -> u64 {
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
        x
    }
    mix(fnv1a64(query.as_bytes()) ^ 0xde5a) % 10 == 0
}

/// A random well-formed string of up to `max_chars` code points spanning the
/// whole scalar-value range, for tokenizer round-trip checks.
pub fn random_utf8(rng: &mut ChaCha8Rng, max_chars: usize) -> String {
    let len = rng.gen_range(0..=max_chars);
    (0..len)
        .map(|_| loop {
            let u = rng.gen_range(0u32..=0x10FFFF);
            if let Some(c) = char::from_u32(u) {
                break c;
            }
        })
        .collect()
}
