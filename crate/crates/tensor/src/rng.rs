//! Counter-based seeded noise.
//!
//! A generator is identified by `(seed, stream label)`; draws are taken in
//! sequence, so every value is a pure function of the seed, the stream and
//! its position in the stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// FNV-1a, used to turn stream labels into stream ids.
pub fn stream_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
pub struct NoiseRng {
    rng: ChaCha8Rng,
}

impl NoiseRng {
    pub fn new(seed: u64, label: &str) -> Self {
        Self::with_stream(seed, stream_id(label))
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseRng { rng }
    }

    /// Stream `label` further keyed by an index (a sample number, a step).
    pub fn indexed(seed: u64, label: &str, index: u64) -> Self {
        Self::with_stream(seed, stream_id(label) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        T::lit(self.rng.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<T> {
        Tensor::from_fn(shape, |_| self.normal())
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(lo + (hi - lo) * self.uniform()))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
