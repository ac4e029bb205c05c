//! Seeded random number generation.
//!
//! Every stochastic component (initialization, disturbance draws, sensor
//! noise) takes an explicit seed and owns its generator. The generator is
//! xoshiro256++ (Blackman & Vigna); `seed_from_u64` expands the 64-bit seed
//! through SplitMix64 (increment `0x9E3779B97F4A7C15`).

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derive an independent stream from a parent seed and a stream tag.
pub fn substream(seed: u64, tag: u64) -> Rng {
    // SplitMix64 finalizer over the combined word.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    seeded(z)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    lo + (hi - lo) * rng.random::<f64>()
}
