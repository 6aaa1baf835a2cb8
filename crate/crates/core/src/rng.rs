//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed from a 64-bit seed. Child streams
//! are derived from `(parent seed, label, index)` rather than from the parent's
//! running state, so the order in which children are created never affects
//! their draws:
//!
//! ```text
//! child_seed = mix(mix(parent_seed ^ fnv1a64(label)) ^ mix(index + 1))
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Distinct `(label, index)` pairs
//! give distinct ChaCha keys.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// The seed of the `(label, index)` child of `seed`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a64(label)) ^ splitmix64(index.wrapping_add(1)))
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, label: &str) -> Self {
        self.derive_indexed(label, 0)
    }

    pub fn derive_indexed(&self, label: &str, index: u64) -> Self {
        Self::new(derive_seed(self.seed, label, index))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        rand::Rng::random_range(&mut self.rng, 0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
