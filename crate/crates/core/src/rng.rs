//! Seed derivation for reproducible replica streams.
//!
//! Every replica owns a stream seeded by `derive_seed(base, index)`, so a single
//! replica can be replayed in isolation and ensemble output does not depend on
//! how replicas are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `index` under base seed `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn replica_rng(base: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, index))
}

/// Child stream drawn from a parent; used for per-channel and auxiliary streams.
pub fn child_rng<R: Rng + ?Sized>(parent: &mut R) -> SimRng {
    SimRng::seed_from_u64(parent.random::<u64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = derive_seed(7, 0);
        assert_eq!(a, derive_seed(7, 0));
        assert_ne!(a, derive_seed(7, 1));
        assert_ne!(a, derive_seed(8, 0));
    }
}
