//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a base
//! seed plus a path of integer tags, so parallel workers never share state and
//! results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tag path into a single 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t.wrapping_add(0x5851_f42d))))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Tag namespaces keep streams for different purposes apart.
pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const HEAD: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const FOLDS: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const SWEEP: u64 = 7;
    pub const STAGE: u64 = 8;
    pub const SOURCE_SPLIT: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
