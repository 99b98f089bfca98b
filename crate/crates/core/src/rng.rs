//! Seeded pseudo-random numbers.
//!
//! xoshiro256** seeded through splitmix64, so a run is reproducible from its
//! integer seed in any implementation of the same two algorithms.

use rand_core::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Prng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Maps the 52 high bits of `bits` to the open interval (0, 1); every result is exact.
pub fn unit_open(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}
