//! Biasless pre-norm transformer encoder with rotary positions, GeGLU
//! feed-forward blocks, alternating global/local attention, sequence packing,
//! and a weight-tied masked-token prediction head.

mod checkpoint;
mod config;
mod layout;
mod model;

pub use checkpoint::{
    load_model, load_optimizer, load_run_state, save_model, save_optimizer, save_run_state,
};
pub use config::EncoderConfig;
pub use layout::{attention_layout, rope_freqs, PackedBatch, RopeFreqs};
pub use model::{expected_param_count, EncoderModel, ForwardPass, Mode};
