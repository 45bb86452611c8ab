//! Deterministic random-stream derivation.
//!
//! Every stochastic component (init, masking, mixture sampling, dropout,
//! shuffles) draws from its own stream, derived statelessly from the master
//! seed plus a label and integer indices. Stateless derivation is what makes
//! checkpoint resume reproduce the original run exactly: step `k` of phase
//! `p` uses the same stream whether or not the process restarted in between.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step: advances the state and returns a well-mixed 64-bit value.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash; stable across platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the 64-bit seed for a named substream.
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut state = master ^ fnv1a64(label.as_bytes());
    let mut out = splitmix64(&mut state);
    for &ix in indices {
        state ^= ix;
        out = splitmix64(&mut state);
    }
    out
}

/// Independent deterministic RNG for the substream `(label, indices)`.
pub fn stream(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, indices))
}

/// Splits one RNG into a child stream (for per-sequence draws inside a batch).
pub fn child_stream(parent: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parent.next_u64())
}
