//! Seeded random streams.
//!
//! Every stream is a SplitMix64 generator; sub-streams are derived by mixing
//! a base seed with integer tags so that results never depend on call order
//! across independent consumers.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::numerics::Tensor;

pub type Stream = SplitMix64;

pub fn stream(seed: u64) -> Stream {
    SplitMix64::seed_from_u64(seed)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the sub-stream identified by `tags` under `base`.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| {
        mix(acc ^ t.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}

pub fn normal_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}
