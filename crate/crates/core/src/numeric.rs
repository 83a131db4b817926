//! Numeric substrate shared by every stage: row-major feature matrices,
//! normalization, cosine similarity, temperature softmax and seeded,
//! purpose-tagged random streams.
//!
//! All arithmetic is `f64`. Banks are stored as `f32` on disk and widened
//! on load.
//!
//! # Random streams
//!
//! Every stochastic stage draws from its own [`RngStream`]: a ChaCha20
//! generator seeded with the run seed (`seed_from_u64`) and switched to the
//! stream number of its [`StreamTag`]. ChaCha20 is counter based and its
//! output is specified independently of the platform, so a `(seed, tag)`
//! pair reproduces the same draws everywhere, and streams with different
//! tags never overlap. Integer draws go through `u64` ranges and shuffles
//! use a local Fisher-Yates loop so that `usize` width never leaks into the
//! sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Row-major matrix of feature vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn zeros(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * rows],
        }
    }

    /// Wraps a flat row-major buffer. The length must be a multiple of `dim`.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::dims(dim, data.len() % dim));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::with_capacity(dim, rows.len());
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dims(self.dim, row.len()));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut m = Self::with_capacity(self.dim, indices.len());
        for &i in indices {
            m.data.extend_from_slice(self.row(i));
        }
        m
    }

    /// Appends all rows of `other`.
    pub fn extend(&mut self, other: &FeatureMatrix) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::dims(self.dim, other.dim));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out)?;
    Ok(out)
}

/// Normalizes `v` in place and returns its original norm.
pub fn l2_normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize"));
    }
    if n <= ZERO_NORM {
        return Err(Error::ZeroVector { norm: n });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dims(u.len(), v.len()));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu <= ZERO_NORM {
        return Err(Error::ZeroVector { norm: nu });
    }
    if nv <= ZERO_NORM {
        return Err(Error::ZeroVector { norm: nv });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Softmax of `logits / tau` with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

/// Purpose of a random stream. The discriminant is the ChaCha stream number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    ToyWorld = 1,
    Mixing = 2,
    PromptInit = 3,
    BatchOrder = 4,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    tag: StreamTag,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, tag: StreamTag) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(tag as u64);
        Self { tag, rng }
    }

    pub fn tag(&self) -> StreamTag {
        self.tag
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        self.rng.random_range(0..n as u64) as usize
    }

    /// Index in `0..n` different from `skip`. Requires `n >= 2`.
    pub fn index_except(&mut self, n: usize, skip: usize) -> usize {
        let i = self.index(n - 1);
        if i >= skip {
            i + 1
        } else {
            i
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Fills a vector of `dim` standard normal draws scaled by `sigma`.
    pub fn gaussian_vec(&mut self, dim: usize, sigma: f64) -> Vec<f64> {
        (0..dim).map(|_| sigma * self.gaussian()).collect()
    }

    /// Uniform direction on the unit sphere.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let mut v = self.gaussian_vec(dim, 1.0);
            if l2_normalize_in_place(&mut v).is_ok() {
                return v;
            }
        }
    }
}

/// Draws from the symmetric `Beta(alpha, alpha)` distribution.
pub fn sample_beta(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonPositiveParameter(alpha));
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::NonPositiveParameter(alpha))?;
    Ok(beta.sample(&mut rng.rng).clamp(0.0, 1.0))
}
