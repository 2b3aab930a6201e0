//! Seed derivation helpers.
//!
//! Every stochastic component takes an explicit `u64` seed. Sub-streams are
//! derived by mixing a salt into the base seed so that independent parts
//! (pair sampling, noise injection, scene generation) never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer. Good avalanche, cheap, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed and a salt.
pub fn derive(base: u64, salt: u64) -> u64 {
    mix(base ^ mix(salt))
}

/// Deterministic RNG for a (base, salt) pair.
pub fn stream(base: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, salt))
}

/// Salts for the crate's independent random streams.
pub mod salt {
    // One salt for both metric directions: the sampled pairs must be a
    // function of the source graph alone, or apls(A,B) != apls(B,A).
    pub const PAIR_SAMPLE: u64 = 0x01;
    pub const ROOT_NOISE: u64 = 0x10;
    pub const ACTION_SAMPLE: u64 = 0x11;
    pub const SCENE: u64 = 0x20;
    pub const KEYPOINTS: u64 = 0x21;
    pub const INIT: u64 = 0x30;
    pub const REPLAY: u64 = 0x31;
    pub const REANALYZE: u64 = 0x32;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_is_deterministic_and_salt_sensitive() {
        assert_eq!(derive(7, 1), derive(7, 1));
        assert_ne!(derive(7, 1), derive(7, 2));
        assert_ne!(derive(7, 1), derive(8, 1));
    }

    #[test]
    fn streams_differ_by_salt() {
        let mut a = stream(42, salt::SCENE);
        let mut b = stream(42, salt::KEYPOINTS);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
