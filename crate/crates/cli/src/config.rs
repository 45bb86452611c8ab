//! The declarative run configuration: one JSON file describes corpus sources,
//! curation knobs, tokenizer, model shape, phase plan, and evaluation suites.
//! Everything is validated (including path existence) before any command
//! touches an output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rexlab_core::corpus::{ClassifierHyper, MinHashParams, BASE_VOCAB};
use rexlab_core::curriculum::PhaseSpec;
use rexlab_core::encoder::EncoderConfig;
use rexlab_core::eval::FineTuneConfig;
use rexlab_core::optim::OptimizerHyper;
use rexlab_core::rng::fnv1a64;
use rexlab_core::{Error, Result};

/// Environment variable used as the root for relative paths in the config.
pub const DATA_DIR_ENV: &str = "REXLAB_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    /// Line-delimited JSON documents `{id, domain, text, label?, score?}`.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurateSection {
    /// Commerce term list driving the labeling oracle and guided-span mining.
    pub lexicon: PathBuf,
    /// Optional list of blocked terms; documents containing any are dropped.
    pub blocklist: Option<PathBuf>,
    /// Minimum ASCII-letter ratio over non-whitespace characters.
    pub min_letter_ratio: f64,
    /// Optional per-source reservoir cap applied after filtering.
    pub sample_per_source: Option<usize>,
    pub dedup_threshold: f64,
    pub minhash: MinHashParams,
    pub classifier: ClassifierHyper,
    /// Score threshold for retention; `None` calibrates against the oracle
    /// labels on the held-out split.
    pub threshold: Option<f64>,
    /// Temperature for source mixture weights (∝ size^(1/T)).
    pub temperature: f64,
}

impl Default for CurateSection {
    fn default() -> Self {
        CurateSection {
            lexicon: PathBuf::new(),
            blocklist: None,
            min_letter_ratio: 0.9,
            sample_per_source: None,
            dedup_threshold: 0.8,
            minhash: MinHashParams::default(),
            classifier: ClassifierHyper::default(),
            threshold: None,
            temperature: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSection {
    /// Pre-trained vocabulary file; `None` trains one on the curated corpus.
    pub path: Option<PathBuf>,
    /// Target vocabulary size when training.
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { path: None, vocab_size: 1024 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainSection {
    pub checkpoint_every: Option<u64>,
    /// Pause after this many optimizer steps per invocation (checkpointing);
    /// `--resume` then continues from where the run left off.
    pub step_limit: Option<u64>,
    pub optimizer: OptimizerHyper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Documents to evaluate recovery on; `None` uses the curated corpus.
    pub docs: Option<PathBuf>,
    /// Cap on evaluated documents (in corpus order).
    pub max_docs: usize,
    pub block_sizes: Vec<usize>,
    pub ks: Vec<usize>,
    /// Graded query–product pairs for the similarity suite; omitting this
    /// disables the suite.
    pub similarity_pairs: Option<PathBuf>,
    pub fine_tune: FineTuneConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            docs: None,
            max_docs: 64,
            block_sizes: vec![128, 256, 512],
            ks: vec![1, 5, 10],
            similarity_pairs: None,
            fine_tune: FineTuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Encoder shape. `vocab_size: 0` takes the tokenizer's size;
    /// `max_seq_len: 0` takes the first phase's sequence length.
    pub model: EncoderConfig,
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub curate: CurateSection,
    /// Phase plan. Empty `mixture_start`/`mixture_end` vectors are filled
    /// with the curation stage's temperature weights.
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// A loaded config plus the hash that stage markers are checked against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub hash: String,
}

/// Resolves a possibly-relative path against `REXLAB_DATA_DIR` when set,
/// otherwise against the config file's directory.
pub fn resolve_path(p: &Path, config_dir: &Path) -> PathBuf {
    if p.as_os_str().is_empty() || p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => config_dir.join(p),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::config(format!("{what} not found at {}", path.display())));
    }
    Ok(())
}

impl RunConfig {
    fn resolve_paths(&mut self, config_dir: &Path) {
        self.output_dir = resolve_path(&self.output_dir, config_dir);
        for s in &mut self.sources {
            s.path = resolve_path(&s.path, config_dir);
        }
        self.curate.lexicon = resolve_path(&self.curate.lexicon, config_dir);
        if let Some(b) = &self.curate.blocklist {
            self.curate.blocklist = Some(resolve_path(b, config_dir));
        }
        if let Some(t) = &self.tokenizer.path {
            self.tokenizer.path = Some(resolve_path(t, config_dir));
        }
        if let Some(d) = &self.eval.docs {
            self.eval.docs = Some(resolve_path(d, config_dir));
        }
        if let Some(p) = &self.eval.similarity_pairs {
            self.eval.similarity_pairs = Some(resolve_path(p, config_dir));
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir must not be empty"));
        }
        if self.sources.is_empty() {
            return Err(Error::config("at least one corpus source is required"));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.sources {
            if s.name.is_empty() {
                return Err(Error::config("source names must not be empty"));
            }
            if !names.insert(&s.name) {
                return Err(Error::config(format!("duplicate source name `{}`", s.name)));
            }
            require_file(&s.path, &format!("source `{}`", s.name))?;
        }
        if self.curate.lexicon.as_os_str().is_empty() {
            return Err(Error::config("curate.lexicon is required"));
        }
        require_file(&self.curate.lexicon, "lexicon")?;
        if let Some(b) = &self.curate.blocklist {
            require_file(b, "blocklist")?;
        }
        if !(0.0..=1.0).contains(&self.curate.min_letter_ratio) {
            return Err(Error::config("curate.min_letter_ratio must lie in [0, 1]"));
        }
        if !(self.curate.dedup_threshold > 0.0 && self.curate.dedup_threshold <= 1.0) {
            return Err(Error::config("curate.dedup_threshold must lie in (0, 1]"));
        }
        if let Some(t) = self.curate.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("curate.threshold must lie in [0, 1]"));
            }
        }
        if self.curate.temperature <= 0.0 {
            return Err(Error::config("curate.temperature must be positive"));
        }
        match &self.tokenizer.path {
            Some(p) => require_file(p, "tokenizer vocabulary")?,
            None => {
                if self.tokenizer.vocab_size <= BASE_VOCAB {
                    return Err(Error::config(format!(
                        "tokenizer.vocab_size must exceed {BASE_VOCAB}, got {}",
                        self.tokenizer.vocab_size
                    )));
                }
            }
        }
        // Shape checks that don't depend on the derived vocab/context fields;
        // zeros mean "derive later" and get stand-in values here.
        let mut shape = self.model.clone();
        if shape.vocab_size == 0 {
            shape.vocab_size = BASE_VOCAB + 1;
        }
        if shape.max_seq_len == 0 {
            shape.max_seq_len = 8;
        }
        shape.validate()?;
        if self.phases.is_empty() || self.phases.len() > 3 {
            return Err(Error::config(format!("expected 1 to 3 phases, got {}", self.phases.len())));
        }
        for p in &self.phases {
            if p.mixture_start.len() != p.mixture_end.len() {
                return Err(Error::config(format!(
                    "phase `{}`: mixture_start and mixture_end differ in length",
                    p.name.name()
                )));
            }
            if !p.mixture_start.is_empty() && p.mixture_start.len() != self.sources.len() {
                return Err(Error::config(format!(
                    "phase `{}` mixes {} sources but {} are configured",
                    p.name.name(),
                    p.mixture_start.len(),
                    self.sources.len()
                )));
            }
        }
        if self.eval.block_sizes.is_empty() || self.eval.ks.is_empty() {
            return Err(Error::config("eval.block_sizes and eval.ks must not be empty"));
        }
        if self.eval.block_sizes.iter().any(|&b| b == 0) || self.eval.ks.iter().any(|&k| k == 0) {
            return Err(Error::config("eval.block_sizes and eval.ks must be positive"));
        }
        if self.eval.max_docs == 0 {
            return Err(Error::config("eval.max_docs must be positive"));
        }
        if let Some(d) = &self.eval.docs {
            require_file(d, "eval document file")?;
        }
        if let Some(p) = &self.eval.similarity_pairs {
            require_file(p, "similarity pair file")?;
        }
        Ok(())
    }
}

/// Parses, resolves, and validates the config; the returned hash covers the
/// fully resolved form (seed override included), so any effective change is
/// visible to stage markers.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut run: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    if let Some(seed) = seed_override {
        run.seed = seed;
    }
    let config_dir = path.parent().unwrap_or_else(|| Path::new("."));
    run.resolve_paths(config_dir);
    run.validate()?;
    let canonical = serde_json::to_string(&run).map_err(Error::from)?;
    let hash = format!("{:016x}", fnv1a64(canonical.as_bytes()));
    Ok(LoadedConfig { run, hash })
}
