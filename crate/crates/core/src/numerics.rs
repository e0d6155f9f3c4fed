//! Vector math and seeded randomness shared by the rest of the crate.
//!
//! All reductions accumulate in `f64`. Randomness comes from ChaCha8
//! (`rand_chacha::ChaCha8Rng`), whose output stream is fixed for a given
//! seed on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense real vector. Dimension is the length.
pub type Vector = Vec<f64>;

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Degenerate(format!("{what} is not finite")))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    finite(a.iter().zip(b).map(|(x, y)| x * y).sum(), "dot product")
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared Euclidean distance `Σ (a_i − b_i)²`.
pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum();
    finite(d, "squared distance")
}

/// Cosine distance `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine distance".into()));
    }
    let cos = dot(a, b)? / (na * nb);
    Ok(finite(1.0 - cos, "cosine distance")?.clamp(0.0, 2.0))
}

pub fn l2_normalize(a: &[f64]) -> Result<Vector> {
    let n = norm(a);
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero-norm vector".into()));
    }
    finite(n, "norm")?;
    Ok(a.iter().map(|x| x / n).collect())
}

/// Seeded ChaCha8 generator.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for a named sub-stream of `seed`; see [`derive_seed`].
    pub fn labeled(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::contract("cannot choose from an empty range"));
        }
        Ok(self.inner.random_range(0..n))
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// Uniform random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::contract("cannot permute an empty range"));
        }
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        Ok(p)
    }

    /// `k` distinct indices from `0..n`, uniformly, in random order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::Capacity(format!("cannot pick {k} distinct items out of {n}")));
        }
        Ok(rand::seq::index::sample(&mut self.inner, n, k).into_vec())
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

/// Mixes a master seed with a stage label (FNV-1a over the label, then a
/// SplitMix64 finalizer) so that stages draw from independent streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
