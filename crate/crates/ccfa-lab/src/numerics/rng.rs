//! Seeded, splittable randomness.
//!
//! The generator is ChaCha12 (counter-based, identical stream on every
//! platform). Consumers never share a stream: [`Rng::derive`] hashes a text
//! tag into the *root* seed, so a child stream depends only on the seed and
//! the tag path, never on how much the parent has drawn. Disabling one
//! consumer (say, the attack) therefore leaves every other stream intact,
//! which is what makes ablation pairs bit-comparable.
//!
//! Distribution transforms (uniform, Box-Muller normal, unbiased range,
//! Fisher-Yates shuffle) are implemented here so the byte-to-value mapping
//! is pinned by this crate rather than by an external crate's internals.

use crate::numerics::Matrix;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; mixes a seed/tag combination into a fresh seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub struct Rng {
    root: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            root: seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream for a named consumer. Depends only on the
    /// root seed and the tag, not on the parent's draw position.
    pub fn derive(&self, tag: &str) -> Rng {
        Rng::new(splitmix64(self.root ^ fnv1a(tag.as_bytes())))
    }

    /// Child stream indexed by a counter (stage number, copy number, ...).
    pub fn derive_indexed(&self, tag: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            self.root ^ fnv1a(tag.as_bytes()) ^ splitmix64(index),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Unbiased integer in [0, n) by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. Draws two uniforms per value and
    /// discards the second branch to keep the stream layout simple.
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u1 = self.unit();
            if u1 > 0.0 {
                let u2 = self.unit();
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.standard_normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("gaussian draws are finite")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample an index proportionally to the nonnegative weights.
    /// Weights must not be all zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(
            total > 0.0 && total.is_finite(),
            "weighted_index needs positive total weight"
        );
        let mut target = self.unit() * total;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                target -= w;
                if target <= 0.0 {
                    return i;
                }
            }
        }
        // Floating-point slack: fall back to the last positive weight.
        weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("at least one positive weight")
    }
}
