//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! whose seed is derived from a caller-supplied master seed plus a stream
//! label, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels for [`derive`].
pub mod streams {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const BIAS: u64 = 0x4249_4153;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const TREE: u64 = 0x5452_4545;
    pub const INFLUENCE: u64 = 0x494e_464c;
    pub const FEATURE: u64 = 0x4645_4154;
    pub const BATCH: u64 = 0x4241_5443;
    pub const SELECT: u64 = 0x5345_4c45;
    pub const REFERENCE: u64 = 0x5245_4645;
    pub const METRIC: u64 = 0x4d45_5452;
    pub const RUN: u64 = 0x5255_4e5f;
    pub const TRUTH: u64 = 0x5452_5554;
    pub const THETA: u64 = 0x5448_4554;
    pub const TRIAL: u64 = 0x5452_4941;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const CAL: u64 = 0x4341_4c5f;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` for the stream `label`.
pub fn derive(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label))
}

/// Derive a child seed for `(label, index)`.
pub fn derive_indexed(seed: u64, label: u64, index: u64) -> u64 {
    derive(derive(seed, label), index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        assert_ne!(derive(1, streams::SPLIT), derive(1, streams::BIAS));
        assert_ne!(derive_indexed(1, streams::RUN, 0), derive_indexed(1, streams::RUN, 1));
        assert_eq!(derive(42, streams::TRAIN), derive(42, streams::TRAIN));
    }
}
