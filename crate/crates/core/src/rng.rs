//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded by
//! a child seed derived from one root:
//!
//! ```text
//! child = splitmix64(splitmix64(splitmix64(root) ^ fnv1a64(label)) ^ index)
//! ```
//!
//! `splitmix64` is the standard finalizer (increment `0x9E3779B97F4A7C15`,
//! multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`) and
//! `fnv1a64` is 64-bit FNV-1a over the UTF-8 bytes of the label. Both are
//! pure integer arithmetic, so streams are identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn mix64(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ fnv1a64(label)) ^ index)
}

/// A root seed from which labeled child streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    root: u64,
}

impl RngStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn child_seed(&self, label: &str, index: u64) -> u64 {
        mix64(self.root, label, index)
    }

    pub fn rng(&self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child_seed(label, index))
    }

    /// A nested stream rooted at a child seed.
    pub fn sub(&self, label: &str, index: u64) -> RngStream {
        RngStream::new(self.child_seed(label, index))
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
