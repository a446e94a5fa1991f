//! Stable seed derivation.
//!
//! Every random stream in a run is derived from the master seed plus a list
//! of string tags, so reordering stages or adding purposes never shifts
//! another stream. The hash is FNV-1a followed by a SplitMix64 finalizer;
//! both are fixed here so seeds stay stable across toolchains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of tags.
pub fn derive_seed(master: u64, tags: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in master.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    for tag in tags {
        for &b in tag.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        // separator so ["ab","c"] and ["a","bc"] differ
        h = (h ^ 0xff).wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

pub fn rng_from(master: u64, tags: &[&str]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
