//! Deterministic stream derivation for reproducible experiments.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the run
//! seed plus a short tag path (domain, round, client, ...). The same
//! `(seed, tags)` yields the same stream on every platform, and replicas
//! keyed by different tags can be sampled in any order or in parallel
//! without perturbing each other.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer, used to spread seed/tag words over the key space.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from a base seed and a tag path.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = mix(seed);
    for (depth, &tag) in tags.iter().enumerate() {
        state = mix(state ^ mix(tag.wrapping_add(depth as u64 + 1)));
    }
    let mut key = [0u8; 32];
    let mut word = state;
    for chunk in key.chunks_exact_mut(8) {
        word = mix(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
