//! Flat-vector arithmetic, sample statistics and seeded random streams.
//!
//! Every estimator in this crate trades in [`GradVec`]s: plain `f64`
//! coordinates in parameter space. Randomness comes from [`RngStream`],
//! a ChaCha8 generator keyed by `(master_seed, stream_id)`. ChaCha exposes
//! independent 64-bit stream selectors, so any stream can be constructed
//! directly without advancing any other, which keeps parallel clients and
//! Monte-Carlo trials order-independent.

use std::ops::Index;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A finite vector in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVec(Vec<f64>);

impl GradVec {
    /// Validates that `values` is non-empty and finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &GradVec) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &GradVec) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn scaled(&self, factor: f64) -> GradVec {
        GradVec(self.0.iter().map(|a| a * factor).collect())
    }

    /// `self - scale * other`
    pub fn minus_scaled(&self, scale: f64, other: &GradVec) -> GradVec {
        debug_assert_eq!(self.dim(), other.dim());
        GradVec(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a - scale * b)
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }
}

impl Index<usize> for GradVec {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

fn shared_dim(vecs: &[GradVec]) -> Result<usize> {
    let first = vecs.first().ok_or(Error::Empty)?;
    let dim = first.dim();
    for v in vecs {
        if v.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
    }
    Ok(dim)
}

/// Component-wise sum of vectors sharing one dimension.
pub fn sum(vecs: &[GradVec]) -> Result<GradVec> {
    let dim = shared_dim(vecs)?;
    let mut acc = GradVec::zeros(dim);
    for v in vecs {
        acc.add_scaled(1.0, v);
    }
    Ok(acc)
}

/// Returns `Σ_k (w_k / Σw) · vecs[k]`.
pub fn weighted_mean(vecs: &[GradVec], weights: &[f64]) -> Result<GradVec> {
    if vecs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: vecs.len(),
            got: weights.len(),
        });
    }
    let dim = shared_dim(vecs)?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights("total weight is zero".into()));
    }
    let mut acc = GradVec::zeros(dim);
    for (v, w) in vecs.iter().zip(weights) {
        acc.add_scaled(w / total, v);
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(acc)
}

/// Arithmetic mean.
pub fn mean(vecs: &[GradVec]) -> Result<GradVec> {
    let mut acc = sum(vecs)?;
    acc.scale(1.0 / vecs.len() as f64);
    if !acc.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub mean: GradVec,
    /// Sum over components of the unbiased (`count - 1`) sample variance.
    pub variance_trace: f64,
    pub count: usize,
}

pub fn sample_stats(vecs: &[GradVec]) -> Result<SampleStats> {
    let mean = mean(vecs)?;
    let count = vecs.len();
    let variance_trace = if count < 2 {
        0.0
    } else {
        let ss: f64 = vecs
            .iter()
            .map(|v| {
                v.iter()
                    .zip(mean.iter())
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum::<f64>()
            })
            .sum();
        ss / (count - 1) as f64
    };
    if !variance_trace.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(SampleStats {
        mean,
        variance_trace,
        count,
    })
}

pub fn norm_sq(v: &GradVec) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Deterministic random stream keyed by `(master_seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream under the same master seed, keyed by this stream's id and `tag`.
    pub fn child(&self, tag: u64) -> RngStream {
        derive_stream(self.master_seed, stream_key(&[self.stream_id, tag]))
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

pub fn derive_stream(master_seed: u64, stream_id: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id);
    RngStream {
        master_seed,
        stream_id,
        rng,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of ids (purpose tag, round, client, ...) into one stream id.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}
