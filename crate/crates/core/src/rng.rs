//! Named, splittable random streams.
//!
//! A [`SeedStream`] is a 64-bit key. Child streams are derived by mixing a
//! label or an index into the key, so every agent, layer and forward pass
//! gets an independent stream from one experiment seed without any shared
//! mutable generator. Drawing from a stream seeds a ChaCha8 generator from
//! the key, which makes the draws a pure function of the derivation path.

use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream named by `label`.
    pub fn derive(&self, label: &str) -> Self {
        // FNV-1a over the label, then mixed with the parent key.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self {
            key: mix(self.key ^ mix(h)),
        }
    }

    /// Child stream numbered by `index`.
    pub fn index(&self, index: u64) -> Self {
        Self {
            key: mix(self.key.rotate_left(17) ^ mix(index.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut k = self.key;
        for chunk in seed.chunks_mut(8) {
            k = mix(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    /// `n` i.i.d. standard-normal draws.
    pub fn normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `n` draws uniform in `[lo, hi)`.
    pub fn uniforms(&self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| lo + (hi - lo) * unit_f64(&mut rng)).collect()
    }
}

/// Uniform `[0, 1)` with 53 bits of precision.
pub fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)`; `n` must be non-zero.
pub fn below<R: RngCore>(rng: &mut R, n: usize) -> usize {
    // Lemire's multiply-shift; bias is < 2^-32 for the sizes used here.
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Fisher-Yates shuffle.
pub fn shuffle<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
