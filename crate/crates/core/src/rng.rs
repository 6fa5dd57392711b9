//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] obtained through
//! [`substream`], keyed by a master seed, a domain tag, and an index. Distinct
//! `(domain, index)` pairs give disjoint ChaCha streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StdRng = ChaCha8Rng;

/// Domain tags for [`substream`].
pub mod domain {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const DP_SAMPLE: u64 = 4;
    pub const DP_NOISE: u64 = 5;
    pub const DIFFUSION: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const ADAPTER_INIT: u64 = 8;
    pub const CLASSIFIER: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, domain, index)`.
pub fn substream(seed: u64, domain: u64, index: u64) -> StdRng {
    let key = splitmix64(seed ^ splitmix64(domain.wrapping_mul(0x2545_f491_4f6c_dd1d)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// A child seed for the stage tagged `tag`, so that stages sharing a
/// domain still draw from unrelated streams.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(master) ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn seeded(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
