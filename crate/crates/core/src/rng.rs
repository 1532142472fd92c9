//! Seeded PRNG used everywhere randomness is consumed.
//!
//! A thin wrapper over ChaCha8 so that (a) every draw is reproducible from a
//! `u64` seed and (b) the full generator state can be captured into a
//! checkpoint and restored bit-exactly (seed + word position).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{f64math, Real};

#[derive(Clone, Debug)]
pub struct Prng {
    rng: ChaCha8Rng,
    seed: [u8; 32],
}

/// Serializable snapshot of a [`Prng`].
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PrngState {
    pub seed: [u8; 32],
    /// ChaCha word position, split into (hi, lo) halves of the u128.
    pub word_pos: (u64, u64),
}

impl Prng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let seed = rng.get_seed();
        Prng { rng, seed }
    }

    pub fn state(&self) -> PrngState {
        let pos = self.rng.get_word_pos();
        PrngState {
            seed: self.seed,
            word_pos: ((pos >> 64) as u64, pos as u64),
        }
    }

    pub fn restore(state: &PrngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        let pos = ((state.word_pos.0 as u128) << 64) | state.word_pos.1 as u128;
        rng.set_word_pos(pos);
        Prng {
            rng,
            seed: state.seed,
        }
    }

    /// Derive an independent child stream (e.g. one per parallel worker).
    pub fn split(&mut self) -> Prng {
        Prng::seed_from_u64(self.next_u64())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<F: Real>(&mut self, lo: F, hi: F) -> F {
        lo + (hi - lo) * F::from_f64(self.uniform_f64())
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(hi > lo);
        lo + self.below(hi - lo)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform_f64();
        f64math::sqrt(-2.0 * f64math::ln(u1)) * f64math::cos(core::f64::consts::TAU * u2)
    }

    /// Normal truncated to two standard deviations, the usual ViT init.
    pub fn trunc_normal<F: Real>(&mut self, std: f64) -> F {
        loop {
            let z = self.normal_f64();
            if z.abs() <= 2.0 {
                return F::from_f64(z * std);
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
