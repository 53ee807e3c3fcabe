//! Deterministic stream derivation. Every stochastic site gets its own
//! ChaCha stream keyed by (seed, purpose tags), so reruns reproduce masks,
//! initializations, shuffles and noise bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_MASK: u64 = 3;
pub const TAG_NOISE: u64 = 4;
pub const TAG_SYNTH: u64 = 5;
pub const TAG_VERIFY: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold tags into a sub-seed; order-sensitive by design.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix(seed);
    for &t in tags {
        s = splitmix(s ^ splitmix(t));
    }
    s
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
