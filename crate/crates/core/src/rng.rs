//! Counter-based deterministic RNG.
//!
//! The stream is ChaCha8 keyed by `seed`; `counter` is the position in 64-bit
//! words, so `(seed, counter)` fully determines every subsequent value.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{numel, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_word_pos(counter as u128 * 2);
        Self {
            seed,
            counter,
            inner,
        }
    }

    pub fn from_state(s: RngState) -> Self {
        Self::at(s.seed, s.counter)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            counter: self.counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream derived from this seed and a stream label. Does not
    /// advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix(self.seed ^ splitmix(stream)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }

    /// Tensor of FP32 values uniform in [lo, hi).
    pub fn uniform(&mut self, shape: &[usize], lo: f32, hi: f32) -> Result<Tensor, TensorError> {
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(TensorError::InvalidRange { lo, hi });
        }
        let (l, h) = (lo as f64, hi as f64);
        let data = (0..numel(shape))
            .map(|_| {
                let v = self.uniform_f64(l, h) as f32;
                // rounding can land exactly on hi
                if v >= hi {
                    lo
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], sd: f64) -> Tensor {
        let data = (0..numel(shape)).map(|_| (self.normal() * sd) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("finite normal samples")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.next_u64() as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let b = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&b[..chunk.len()]);
        }
    }
}

/// Free-function form of [`Rng::uniform`].
pub fn rng_uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Result<Tensor, TensorError> {
    rng.uniform(shape, lo, hi)
}
