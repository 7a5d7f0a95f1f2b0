//! Deterministic counter-based randomness.
//!
//! Every random draw in the simulator comes from a [`CounterRng`] keyed by a
//! 64-bit seed. The generator is SplitMix64: the `i`-th output is the
//! SplitMix64 finalizer applied to `key + i·0x9E3779B97F4A7C15`. Normal
//! variates use the Box–Muller transform and consume outputs in pairs, the
//! cosine branch first. Seeds for sub-streams are derived with [`mix64`], so
//! a client and the server that know `(base_seed, round, client, iteration)`
//! regenerate bit-identical perturbations.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_INIT: u64 = 0x243F_6A88_85A3_08D3;
const MIX_MUL: u64 = 0xD6E8_FEB8_6659_FD93;

/// SplitMix64 output function.
#[inline]
pub fn splitmix64_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words into one seed.
///
/// `h₀ = 0x243F6A8885A308D3`, `hᵢ₊₁ = finalize((hᵢ + φ) ^ (pᵢ · 0xD6E8FEB86659FD93))`.
pub fn mix64(parts: &[u64]) -> u64 {
    parts.iter().fold(MIX_INIT, |h, &p| {
        splitmix64_finalize(h.wrapping_add(GOLDEN) ^ p.wrapping_mul(MIX_MUL))
    })
}

/// Seed of the perturbation stream for one local iteration of one client.
pub fn perturbation_seed(base_seed: u64, round: u64, client: u64, iteration: u64) -> u64 {
    mix64(&[base_seed, round, client, iteration])
}

/// Domain tags that keep unrelated streams derived from one master seed apart.
pub mod tag {
    pub const DATASET: u64 = 1;
    pub const EVAL_SET: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const LOCAL_SPLIT: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const ROUND_SEED: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const INIT: u64 = 8;
    pub const PERSONALIZE: u64 = 9;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare: Option<u64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            counter: 0,
            spare: None,
        }
    }

    pub fn from_parts(parts: &[u64]) -> Self {
        Self::new(mix64(parts))
    }

    /// A stream positioned so that the next output is word `counter` (0-based).
    pub fn with_counter(seed: u64, counter: u64) -> Self {
        Self {
            key: seed,
            counter,
            spare: None,
        }
    }

    #[inline]
    pub fn next_word(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        splitmix64_finalize(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_word() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn next_f64_open0(&mut self) -> f64 {
        ((self.next_word() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal variate.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(bits) = self.spare.take() {
            return f64::from_bits(bits);
        }
        let u1 = self.next_f64_open0();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some((r * theta.sin()).to_bits());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.next_normal();
        }
    }

    /// Uniform integer in `[0, bound)`; `bound` must be positive.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        // Lemire's multiply-shift; the bias is below 2^-64 · bound.
        ((self.next_word() as u128 * bound as u128) >> 64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_word() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_word()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let w = self.next_word().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // SplitMix64 seeded with 0: published first outputs.
        let mut r = CounterRng::new(0);
        assert_eq!(r.next_word(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_word(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_word(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = CounterRng::new(perturbation_seed(7, 1, 2, 3));
        let mut b = CounterRng::new(perturbation_seed(7, 1, 2, 3));
        for _ in 0..1000 {
            assert_eq!(a.next_normal().to_bits(), b.next_normal().to_bits());
        }
        assert_ne!(perturbation_seed(7, 1, 2, 3), perturbation_seed(7, 1, 3, 2));
    }

    #[test]
    fn normal_moments() {
        let mut r = CounterRng::new(11);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.next_normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // 4 standard errors
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn with_counter_skips_ahead() {
        let mut a = CounterRng::new(5);
        for _ in 0..6 {
            a.next_word();
        }
        let mut b = CounterRng::with_counter(5, 6);
        assert_eq!(a.next_word(), b.next_word());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        CounterRng::new(3).shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
