//! Seed derivation. Every stochastic step draws from its own stream so that
//! adding or skipping one step never shifts another's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream for `purpose` under `seed` (SplitMix64-style mixing).
pub fn stream(seed: u64, purpose: &str) -> Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in purpose.bytes() {
        h = mix(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(mix(h))
}

/// A child seed for `purpose`, for APIs that take a seed rather than a stream.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = seed ^ 0x6A09_E667_F3BC_C908;
    for b in purpose.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
