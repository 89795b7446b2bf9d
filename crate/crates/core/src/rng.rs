//! Seeded, stream-addressable random numbers.
//!
//! Every stochastic site (parameter init, β draws, data, probes) owns its own
//! `(seed, stream)` pair, so adding draws at one site never shifts another.
//! `Rng::substream` derives a fresh generator for an indexed event (the n-th
//! batch, the n-th optimizer step) without having to replay earlier draws.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Well-known stream ids. Keeping them in one place makes collisions obvious.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const ROUTER_INIT: u64 = 2;
    pub const SHARED_EXPERT_INIT: u64 = 3;
    pub const EVOLUTION: u64 = 10;
    pub const TRAIN_DATA: u64 = 20;
    pub const EVAL_DATA: u64 = 99;
    pub const PROBE: u64 = 200;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Generator for the `index`-th event of `stream`.
    pub fn substream(seed: u64, stream: u64, index: u64) -> Self {
        let derived = splitmix64(splitmix64(stream) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Rng::new(seed, derived)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::new(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in the closed interval `[lo, hi]`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite, non-negative standard deviation")
            .sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize, mean: f64, std: f64) -> Vec<f64> {
        let dist = Normal::new(mean, std).expect("finite, non-negative standard deviation");
        (0..n).map(|_| dist.sample(&mut self.inner)).collect()
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.inner);
        p
    }
}
