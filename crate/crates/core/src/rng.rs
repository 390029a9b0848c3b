//! Seeded randomness helpers.
//!
//! Every stochastic step in the crate draws from a [`ChaCha8Rng`] seeded from a
//! user seed, optionally mixed with a stream tag so that independent consumers
//! of one seed do not share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser, used to derive child seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

pub fn normal_f32(rng: &mut Rng) -> f32 {
    StandardNormal.sample(rng)
}

pub fn normal_f64(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f32]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// FNV-1a over the bit patterns of a float slice; used for frozen-weight checksums.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.write_bytes(&v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
