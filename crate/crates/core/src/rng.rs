//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from a ChaCha8 generator. A
//! top-level seed is split into independent streams by ChaCha's 64-bit stream
//! selector, so a given `(seed, stream)` pair always yields the same sequence
//! regardless of how work is scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Generator for stream 0 of `seed`.
pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for an arbitrary stream of `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a per-stage seed from a top-level seed and a stage tag.
///
/// The tag is hashed with 64-bit FNV-1a to select a stream, and the first
/// word of that stream is the derived seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    stream(seed, h).next_u64()
}
