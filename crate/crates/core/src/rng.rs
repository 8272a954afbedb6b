//! Seeded, splittable pseudo-random streams.
//!
//! Every consumer derives its own stream from `(seed, stream id)` so that
//! adding draws in one module never shifts the numbers another module sees.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids used by the crate. Kept in one place so they never collide.
pub mod stream {
    pub const PARAMS: u64 = 1;
    pub const GROUPING: u64 = 2;
    pub const MIXING: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const DATA: u64 = 5;
    pub const DATA_CALIBRATION: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream `stream` of the generator seeded by `seed`.
    pub fn split(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Derive a child stream from this generator's next output.
    pub fn fork(&mut self, stream: u64) -> Self {
        Self::split(self.0.next_u64(), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Standard logistic variate.
    pub fn logistic(&mut self) -> f64 {
        let u = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        libm::log(u / (1.0 - u))
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
