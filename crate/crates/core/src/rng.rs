//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the global
//! seed plus a tuple of tags (patient index, epoch, batch, ...), so results do
//! not depend on the order in which independent pieces of work run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SmartRng = ChaCha8Rng;

pub mod tags {
    pub const INIT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const MASK_PLAN: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> SmartRng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    SmartRng::seed_from_u64(h)
}
