//! Reproducible random streams keyed by integer tags.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is a SplitMix64 mix of
//! the base seed and the tags, so draw `(seed, i, j)` never depends on how many
//! other streams exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Domain tags keep unrelated consumers of the same base seed apart.
pub const TAG_INCLUSION: u64 = 0x1;
pub const TAG_LOGSINE: u64 = 0x2;
pub const TAG_BOUNDARY: u64 = 0x3;
pub const TAG_PROBE: u64 = 0x4;
pub const TAG_KMEANS: u64 = 0x5;
pub const TAG_SUBSET: u64 = 0x6;
