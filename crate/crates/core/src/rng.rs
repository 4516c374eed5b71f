//! Seeded, serializable random streams.
//!
//! Every stream is a xoshiro256++ generator whose state is derived from a
//! `(seed, stream)` pair via SplitMix64, so independent purposes (weight
//! init, dropout, sampling, shuffling) draw from disjoint streams and the
//! whole pipeline is reproducible from a single seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

/// Well-known stream identifiers.
pub mod streams {
    pub const SIMULATE: u64 = 1;
    pub const PINWHEEL: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const DROPOUT: u64 = 12;
    pub const SAMPLING: u64 = 13;
    pub const EM_INIT: u64 = 14;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    inner: Xoshiro256PlusPlus,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mixed = splitmix64(seed) ^ splitmix64(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        Self {
            seed,
            stream,
            inner: Xoshiro256PlusPlus::seed_from_u64(mixed),
        }
    }

    /// A child stream, e.g. one per epoch or per sequence.
    pub fn fork(&self, sub: u64) -> Self {
        Self::new(
            splitmix64(self.seed ^ splitmix64(self.stream)),
            sub.wrapping_add(0x5851_F42D_4C95_7F2D),
        )
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on (0, 1], safe for `-ln(u)`.
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Exponential with unit rate.
    pub fn exp1(&mut self) -> f64 {
        Exp1.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
