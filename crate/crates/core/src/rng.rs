//! Deterministic random streams.
//!
//! Every stochastic routine receives an explicit generator. Routines whose
//! batched and sequential forms must agree draw from *substreams* keyed by
//! position, so the number of draws made elsewhere never shifts their values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type AceRng = ChaCha8Rng;

/// A seeded generator.
pub fn seeded(seed: u64) -> AceRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The `key`-th substream of `seed`. Substreams of the same seed never overlap.
pub fn substream(seed: u64, key: u64) -> AceRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Mixes two integers into a new seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, 3).random();
        let b: u64 = substream(7, 3).random();
        let c: u64 = substream(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(1, 2), derive_seed(2, 1));
    }
}
