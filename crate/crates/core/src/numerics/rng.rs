//! Seeded, splittable random streams.
//!
//! Every stream remembers the seed it was built from, so a child stream can
//! be derived from a label without consuming parent state. Stages, samples
//! and trajectories each get their own child stream, which keeps results
//! independent of evaluation order and thread scheduling.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a textual label into a child seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`. Does not advance `self`.
    pub fn child(&self, label: &str) -> Rng {
        Rng::new(derive_seed(self.seed, label))
    }

    /// Independent stream keyed by `label` and an index.
    pub fn child_indexed(&self, label: &str, index: usize) -> Rng {
        Rng::new(derive_seed(derive_seed(self.seed, label), &index.to_string()))
    }

    /// Draws a fresh seed from the stream (advances `self`).
    pub fn next_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)` in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Returns `mean + std·z` with `z` standard normal.
pub fn gaussian_sample(rng: &mut Rng, mean: &[f64], std: f64) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::argument(format!("gaussian std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(mean.to_vec());
    }
    Ok(mean.iter().map(|m| m + std * rng.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_returns_mean_exactly() {
        let mut rng = Rng::new(1);
        let m = vec![0.1, -2.5, 3.0];
        assert_eq!(gaussian_sample(&mut rng, &m, 0.0).unwrap(), m);
    }

    #[test]
    fn negative_std_rejected() {
        let mut rng = Rng::new(1);
        assert!(gaussian_sample(&mut rng, &[0.0], -0.1).is_err());
        assert!(gaussian_sample(&mut rng, &[0.0], f64::NAN).is_err());
    }

    #[test]
    fn fixed_seed_bit_identical() {
        let a = gaussian_sample(&mut Rng::new(42), &[1.0; 5], 0.3).unwrap();
        let b = gaussian_sample(&mut Rng::new(42), &[1.0; 5], 0.3).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let n = 100_000;
        let (mean, std) = (1.7, 0.4);
        let mut rng = Rng::new(9);
        let total: f64 = (0..n)
            .map(|_| gaussian_sample(&mut rng, &[mean], std).unwrap()[0])
            .sum();
        let bound = 5.0 * std / (n as f64).sqrt();
        assert!((total / n as f64 - mean).abs() < bound);
    }

    #[test]
    fn children_are_independent_of_parent_progress() {
        let mut parent = Rng::new(3);
        let c1 = parent.child("x").standard_normal();
        parent.standard_normal();
        let c2 = parent.child("x").standard_normal();
        assert_eq!(c1, c2);
        assert_ne!(parent.child("x").seed(), parent.child("y").seed());
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut rng = Rng::new(5);
        let mut v = rng.choose_distinct(10, 6);
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 6);
    }
}
