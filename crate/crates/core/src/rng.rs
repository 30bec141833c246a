//! Reproducible random streams.
//!
//! Every random draw comes from a ChaCha8 generator keyed by
//! `(seed, epoch)` and addressed by a 64-bit stream id, so per-patch work can
//! run in any thread order and still produce identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded in model metadata.
pub const RNG_ALGORITHM: &str = "chacha8-splitmix64-keyed";

/// Stream id reserved for global (non per-patch) draws.
pub const GLOBAL_STREAM: u64 = u64::MAX;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for `stream` within `epoch` of a run seeded by `seed`.
pub fn substream(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed;
    for (chunk, salt) in key.chunks_exact_mut(8).zip([0u64, 1, 2, 3]) {
        state = splitmix64(state ^ splitmix64(epoch.wrapping_add(salt)));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed (e.g. for a sub-run).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, 3, 11).random();
        let b: u64 = substream(7, 3, 11).random();
        let c: u64 = substream(7, 3, 12).random();
        let d: u64 = substream(7, 4, 11).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
