//! Finite weighted measures on R^d.
//!
//! A [`DiscreteMeasure`] is a multiset of `n` points with nonnegative weights
//! summing to one. It represents both the empirical source `mu^m` and the
//! reproduction measure `nu` that the solvers optimize. Points are stored
//! row-major in a single buffer.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest deviation of the weight sum from one that is silently renormalized.
pub const RENORMALIZE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl DiscreteMeasure {
    /// Builds a measure from row-major `points` and `weights`.
    ///
    /// Weights whose sum is within [`RENORMALIZE_SLACK`] of one are divided by
    /// their sum; anything further off is rejected.
    pub fn new(points: Vec<f64>, weights: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        if weights.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if points.len() != weights.len() * dim {
            return Err(Error::ShapeMismatch {
                expected_rows: weights.len(),
                expected_cols: dim,
                rows: points.len() / dim,
                cols: dim,
            });
        }
        check_finite(&points, dim)?;
        let mut weights = weights;
        normalize_weights(&mut weights)?;
        Ok(Self {
            points,
            weights,
            dim,
        })
    }

    /// Uniform weights `1/n` on the given row-major points.
    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if points.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len() % dim,
            });
        }
        check_finite(&points, dim)?;
        let n = points.len() / dim;
        Ok(Self {
            points,
            weights: vec![1.0 / n as f64; n],
            dim,
        })
    }

    /// A unit point mass.
    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::uniform(point.to_vec(), point.len())
    }

    /// Uniform measure over rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let dim = first.as_ref().len();
        let mut points = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            points.extend_from_slice(row);
        }
        Self::uniform(points, dim)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// Same weights, new atom locations.
    pub fn with_points(&self, points: Vec<f64>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::ShapeMismatch {
                expected_rows: self.len(),
                expected_cols: self.dim,
                rows: points.len() / self.dim,
                cols: self.dim,
            });
        }
        check_finite(&points, self.dim)?;
        Ok(Self {
            points,
            weights: self.weights.clone(),
            dim: self.dim,
        })
    }

    /// Same atom locations, new weights (renormalized as in [`DiscreteMeasure::new`]).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.points.clone(), weights, self.dim)
    }

    /// Weighted mean of the atoms.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (p, w) in self.iter() {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += w * x;
            }
        }
        mean
    }

    pub fn has_uniform_weights(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| w == w0)
    }

    pub(crate) fn from_parts_unchecked(points: Vec<f64>, weights: Vec<f64>, dim: usize) -> Self {
        debug_assert_eq!(points.len(), weights.len() * dim);
        Self {
            points,
            weights,
            dim,
        }
    }
}

fn check_finite(points: &[f64], dim: usize) -> Result<()> {
    match points.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::NonFinite {
            row: k / dim,
            col: k % dim,
        }),
        None => Ok(()),
    }
}

fn normalize_weights(weights: &mut [f64]) -> Result<()> {
    if let Some(k) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weight {k} is {}",
            weights[k]
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > RENORMALIZE_SLACK {
        return Err(Error::InvalidWeights(format!(
            "weights sum to {total}, not 1"
        )));
    }
    if total != 1.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(())
}

/// Uniform empirical measure on the rows of a row-major `m x dim` sample matrix.
pub fn empirical_from_samples(samples: &[f64], dim: usize) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(samples.to_vec(), dim)
}

/// Seed for a reproducible random stream.
///
/// The `master` seed is fixed per experiment and `stream` separates tasks
/// (one per lambda, per method, per minibatch ...). Identical pairs give
/// identical sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub master: u64,
    pub stream: u64,
}

impl RngSeed {
    pub fn new(master: u64) -> Self {
        Self { master, stream: 0 }
    }

    /// Child seed for sub-task `key`. Deterministic and distinct per key.
    pub fn fork(self, key: u64) -> Self {
        Self {
            master: self.master,
            stream: splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x9E37_79B9_7F4A_7C15))),
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inverse-CDF sampler over the atoms of a measure.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    len: usize,
    /// Prefix sums of the weights; `None` when all weights are equal.
    cdf: Option<Vec<f64>>,
}

impl WeightedSampler {
    pub fn new(mu: &DiscreteMeasure) -> Self {
        let cdf = (!mu.has_uniform_weights()).then(|| {
            let mut acc = 0.0;
            mu.weights()
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect()
        });
        Self { len: mu.len(), cdf }
    }

    /// Index of one atom drawn according to the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.cdf {
            None => rng.random_range(0..self.len),
            Some(cdf) => {
                let u = rng.random::<f64>() * cdf[self.len - 1];
                cdf.partition_point(|&c| c <= u).min(self.len - 1)
            }
        }
    }
}

/// Draws an i.i.d. minibatch of `m` atoms from `mu` (with replacement).
///
/// With `full_batch` set and at most `m` atoms in `mu`, `mu` itself is
/// returned, mirroring the "support larger than the batch" branch of the
/// stochastic descent loop.
pub fn draw_minibatch(
    mu: &DiscreteMeasure,
    m: usize,
    seed: RngSeed,
    full_batch: bool,
) -> Result<DiscreteMeasure> {
    if m == 0 {
        return Err(Error::InvalidBatch);
    }
    if full_batch && mu.len() <= m {
        return Ok(mu.clone());
    }
    let sampler = WeightedSampler::new(mu);
    Ok(minibatch_with(mu, &sampler, m, &mut seed.rng()))
}

pub(crate) fn minibatch_with<R: Rng + ?Sized>(
    mu: &DiscreteMeasure,
    sampler: &WeightedSampler,
    m: usize,
    rng: &mut R,
) -> DiscreteMeasure {
    let mut points = Vec::with_capacity(m * mu.dim());
    for _ in 0..m {
        points.extend_from_slice(mu.point(sampler.sample_index(rng)));
    }
    DiscreteMeasure::from_parts_unchecked(points, vec![1.0 / m as f64; m], mu.dim())
}

/// Picks `n` atoms of `mu` as a uniform-weight starting measure.
///
/// For uniform-weight measures the atoms are visited in a random order and
/// exact duplicates are skipped, so distinct starting particles are used
/// whenever `mu` has at least `n` distinct points. Missing particles are then
/// filled by weighted draws with replacement.
pub fn initial_particles(mu: &DiscreteMeasure, n: usize, seed: RngSeed) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: "particle count must be at least 1".into(),
        });
    }
    let mut rng = seed.rng();
    let dim = mu.dim();
    let mut points: Vec<f64> = Vec::with_capacity(n * dim);
    if mu.has_uniform_weights() && mu.len() >= n {
        let order = index::sample(&mut rng, mu.len(), mu.len());
        let mut chosen = 0;
        for i in order.iter() {
            let p = mu.point(i);
            if points.chunks_exact(dim).any(|q| q == p) {
                continue;
            }
            points.extend_from_slice(p);
            chosen += 1;
            if chosen == n {
                break;
            }
        }
    }
    let sampler = WeightedSampler::new(mu);
    while points.len() < n * dim {
        points.extend_from_slice(mu.point(sampler.sample_index(&mut rng)));
    }
    Ok(DiscreteMeasure::from_parts_unchecked(
        points,
        vec![1.0 / n as f64; n],
        dim,
    ))
}
