//! Encoder architecture configuration and the four standard sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_base() -> f64 {
    10_000.0
}
fn default_ntk_scale() -> f64 {
    1.0
}
fn default_window() -> usize {
    128
}
fn default_global_every() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.1
}
fn default_norm_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters; everything a checkpoint needs to rebuild the
/// model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Rotary base frequency, shared by global and local attention layers.
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Context-extension rescale factor applied to the rotary base.
    #[serde(default = "default_ntk_scale")]
    pub ntk_scale: f64,
    /// Maximum relative distance attended by local layers.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Every `global_every`-th layer (1-based) attends globally.
    #[serde(default = "default_global_every")]
    pub global_every: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl EncoderConfig {
    /// 7 layers × 256 hidden, 384 intermediate, 4 heads.
    pub fn micro(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::sized(7, 256, 384, 4, vocab_size, max_seq_len)
    }

    /// 19 layers × 512 hidden, 768 intermediate, 8 heads.
    pub fn mini(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::sized(19, 512, 768, 8, vocab_size, max_seq_len)
    }

    /// 22 layers × 768 hidden, 1152 intermediate, 12 heads.
    pub fn base(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::sized(22, 768, 1152, 12, vocab_size, max_seq_len)
    }

    /// 28 layers × 1024 hidden, 2624 intermediate, 16 heads.
    pub fn large(vocab_size: usize, max_seq_len: usize) -> Self {
        Self::sized(28, 1024, 2624, 16, vocab_size, max_seq_len)
    }

    /// A config of the given shape with all other knobs at their defaults.
    pub fn sized(
        layers: usize,
        hidden: usize,
        intermediate: usize,
        heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        EncoderConfig {
            layers,
            hidden,
            intermediate,
            heads,
            vocab_size,
            max_seq_len,
            rope_base: default_rope_base(),
            ntk_scale: default_ntk_scale(),
            window: default_window(),
            global_every: default_global_every(),
            dropout: default_dropout(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return Err(Error::config("layers, hidden, intermediate, heads must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        let hd = self.head_dim();
        if hd < 4 || hd % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim {hd} must be an even number ≥ 4 for rotary positions"
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len must be positive"));
        }
        if self.rope_base <= 1.0 {
            return Err(Error::config(format!("rope_base {} must exceed 1", self.rope_base)));
        }
        if self.ntk_scale <= 0.0 {
            return Err(Error::config(format!("ntk_scale {} must be positive", self.ntk_scale)));
        }
        if self.window == 0 || self.global_every == 0 {
            return Err(Error::config("window and global_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::config(format!("norm_eps {} must be positive", self.norm_eps)));
        }
        Ok(())
    }
}
