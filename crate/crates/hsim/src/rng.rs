//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 4-tuple of 64-bit values (seed, indices, purpose tag), so any draw depends
//! only on its key and never on how many draws happened elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping unrelated streams disjoint.
pub mod tag {
    pub const GENERATE: u64 = 0x01;
    pub const NOISE: u64 = 0x02;
    pub const MODEL_INIT: u64 = 0x03;
    pub const BATCH: u64 = 0x04;
    pub const AUGMENT: u64 = 0x05;
}

/// Stream keyed by `[seed, a, b, tag]`.
pub fn stream(parts: [u64; 4]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (chunk, part) in seed.chunks_exact_mut(8).zip(parts) {
        chunk.copy_from_slice(&part.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
