//! Seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of `base`. Distinct streams of one base, and
/// equal streams of distinct bases, give unrelated seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(mix(base) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream tags so different consumers of one seed never share draws.
pub mod tags {
    pub const ANATOMY: u64 = 1;
    pub const CASE: u64 = 2;
    pub const SPLITS: u64 = 3;
    pub const CONDITIONING: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const ATLAS: u64 = 6;
}
