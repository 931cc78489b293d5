//! Seed derivation. Every random stream in the crate is a ChaCha8 generator whose
//! seed is mixed from a global seed plus a tuple of context words with SplitMix64,
//! so independent tasks never share state and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a global seed with context words into a new seed.
pub fn derive_seed(seed: u64, context: &[u64]) -> u64 {
    context
        .iter()
        .fold(splitmix64(seed), |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn rng_from(seed: u64, context: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, context))
}

// Stream tags so call sites never collide.
pub(crate) const STREAM_NEGATIVES: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_GRAPH: u64 = 3;
pub(crate) const STREAM_INIT: u64 = 4;
pub(crate) const STREAM_PAIRS: u64 = 5;
pub(crate) const STREAM_BPRMF: u64 = 6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_context_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }
}
