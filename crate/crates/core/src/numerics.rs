//! Log-sum-exp smoothing primitives, small vector helpers and the seeded
//! random stream used throughout the simulator.
//!
//! Every exponential sum is evaluated after shifting by the extreme element,
//! so losses in the millions at `mu = 1e-2` still produce finite results.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn check_input(y: &[f64], mu: f64) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Domain("empty input vector".into()));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Domain(format!("smoothing parameter must be positive and finite, got {mu}")));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite input entry {bad}")));
    }
    Ok(())
}

fn max_of(y: &[f64]) -> f64 {
    y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(y: &[f64]) -> f64 {
    y.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `mu * ln(sum_i exp(y_i / mu))`, the smooth upper approximation of `max(y)`.
pub fn log_sum_exp(y: &[f64], mu: f64) -> Result<f64> {
    check_input(y, mu)?;
    let m = max_of(y);
    let s: f64 = y.iter().map(|&v| ((v - m) / mu).exp()).sum();
    Ok(m + mu * s.ln())
}

/// `-mu * ln(sum_i exp(-y_i / mu))`, the smooth lower approximation of `min(y)`.
pub fn smooth_min(y: &[f64], mu: f64) -> Result<f64> {
    check_input(y, mu)?;
    let m = min_of(y);
    let s: f64 = y.iter().map(|&v| (-(v - m) / mu).exp()).sum();
    Ok(m - mu * s.ln())
}

/// Normalized `exp(-y_k / mu)`. Largest weight goes to the smallest entry.
pub fn softmin_weights(y: &[f64], mu: f64) -> Result<Vec<f64>> {
    check_input(y, mu)?;
    Ok(softmin_unchecked(y, mu).0)
}

/// Softmin weights together with `ln(sum_k exp(-y_k / mu))`.
///
/// Inputs must already be validated.
pub(crate) fn softmin_unchecked(y: &[f64], mu: f64) -> (Vec<f64>, f64) {
    let m = min_of(y);
    let mut w: Vec<f64> = y.iter().map(|&v| (-(v - m) / mu).exp()).collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    (w, -m / mu + s.ln())
}

/// Softmax of `z` (no temperature), shifted by the maximum.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = max_of(z);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Logical random streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batch = 3,
    Split = 4,
    Partition = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream. Substreams are keyed by a seed plus a path of
/// integers (stream kind, round, client, model, ...), so the randomness a
/// task sees never depends on scheduling order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent substream identified by `(seed, stream, path)`.
    pub fn substream(seed: u64, stream: Stream, path: &[u64]) -> Self {
        let mut h = splitmix64(seed ^ splitmix64(stream as u64));
        for &p in path {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
        }
        Self::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, self)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
