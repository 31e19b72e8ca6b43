//! Distortion functions and pairwise distortion matrices.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

/// Rows per block when assembling a pairwise matrix.
pub const DEFAULT_BLOCK_ROWS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    /// `0.5 * |x - y|^2`
    HalfSquaredEuclidean,
    /// `|x - y|^2`
    SquaredEuclidean,
    /// Number of coordinates in which `x` and `y` differ.
    Hamming,
    /// Precomputed costs indexed by (source row, reproduction atom).
    CustomMatrix,
}

impl DistortionKind {
    pub fn is_differentiable(self) -> bool {
        matches!(self, Self::HalfSquaredEuclidean | Self::SquaredEuclidean)
    }
}

/// Dense row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected_rows: rows,
                expected_cols: cols,
                rows: data.len() / cols.max(1),
                cols,
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DistortionOverflow {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// The distortion function `rho(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionSpec {
    kind: DistortionKind,
    custom: Option<Arc<CostMatrix>>,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        Self::half_squared()
    }
}

impl DistortionSpec {
    pub fn half_squared() -> Self {
        Self {
            kind: DistortionKind::HalfSquaredEuclidean,
            custom: None,
        }
    }

    pub fn squared() -> Self {
        Self {
            kind: DistortionKind::SquaredEuclidean,
            custom: None,
        }
    }

    pub fn hamming() -> Self {
        Self {
            kind: DistortionKind::Hamming,
            custom: None,
        }
    }

    pub fn custom(costs: CostMatrix) -> Self {
        Self {
            kind: DistortionKind::CustomMatrix,
            custom: Some(Arc::new(costs)),
        }
    }

    /// Built-in kinds only; `CustomMatrix` needs [`DistortionSpec::custom`].
    pub fn from_kind(kind: DistortionKind) -> Result<Self> {
        match kind {
            DistortionKind::HalfSquaredEuclidean => Ok(Self::half_squared()),
            DistortionKind::SquaredEuclidean => Ok(Self::squared()),
            DistortionKind::Hamming => Ok(Self::hamming()),
            DistortionKind::CustomMatrix => Err(Error::Unsupported(
                "custom_matrix distortion needs an explicit cost matrix",
            )),
        }
    }

    pub fn kind(&self) -> DistortionKind {
        self.kind
    }

    pub fn is_differentiable(&self) -> bool {
        self.kind.is_differentiable()
    }

    pub(crate) fn require_differentiable(&self) -> Result<()> {
        if self.is_differentiable() {
            Ok(())
        } else {
            Err(Error::NotDifferentiable(self.kind))
        }
    }

    /// Checks that this distortion can be evaluated between `xs` and `ys`.
    pub fn check_compatible(&self, xs: &DiscreteMeasure, ys: &DiscreteMeasure) -> Result<()> {
        match &self.custom {
            Some(c) if c.rows() != xs.len() || c.cols() != ys.len() => Err(Error::ShapeMismatch {
                expected_rows: c.rows(),
                expected_cols: c.cols(),
                rows: xs.len(),
                cols: ys.len(),
            }),
            Some(_) => Ok(()),
            None if xs.dim() != ys.dim() => Err(Error::DimensionMismatch {
                expected: xs.dim(),
                got: ys.dim(),
            }),
            None => Ok(()),
        }
    }

    /// `rho(x_i, y_j)`; the indices are only read by `CustomMatrix`.
    #[inline]
    pub fn cost(&self, i: usize, x: &[f64], j: usize, y: &[f64]) -> f64 {
        match self.kind {
            DistortionKind::HalfSquaredEuclidean => 0.5 * sq_dist(x, y),
            DistortionKind::SquaredEuclidean => sq_dist(x, y),
            DistortionKind::Hamming => x.iter().zip(y).filter(|(a, b)| a != b).count() as f64,
            DistortionKind::CustomMatrix => self
                .custom
                .as_ref()
                .expect("custom distortion carries its matrix")
                .get(i, j),
        }
    }

    /// `d rho(x, y) / dy`.
    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.require_differentiable()?;
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        let mut out = vec![0.0; y.len()];
        self.add_grad_y(x, y, 1.0, &mut out);
        Ok(out)
    }

    /// `out += scale * d rho(x, y) / dy` for differentiable kinds.
    #[inline]
    pub(crate) fn add_grad_y(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let factor = match self.kind {
            DistortionKind::HalfSquaredEuclidean => scale,
            DistortionKind::SquaredEuclidean => 2.0 * scale,
            _ => unreachable!("gradient requested for a non-differentiable distortion"),
        };
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o += factor * (b - a);
        }
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Distortion between every atom of `xs` and every atom of `ys`.
pub fn pairwise_distortion(
    spec: &DistortionSpec,
    xs: &DiscreteMeasure,
    ys: &DiscreteMeasure,
) -> Result<CostMatrix> {
    pairwise_distortion_blocked(spec, xs, ys, DEFAULT_BLOCK_ROWS)
}

/// [`pairwise_distortion`] computed in row blocks of `block_rows`.
pub fn pairwise_distortion_blocked(
    spec: &DistortionSpec,
    xs: &DiscreteMeasure,
    ys: &DiscreteMeasure,
    block_rows: usize,
) -> Result<CostMatrix> {
    spec.check_compatible(xs, ys)?;
    let (m, n) = (xs.len(), ys.len());
    let block_rows = block_rows.max(1);
    let mut data = vec![0.0; m * n];
    data.par_chunks_mut(block_rows * n)
        .enumerate()
        .try_for_each(|(b, block)| {
            for (r, row) in block.chunks_exact_mut(n).enumerate() {
                let i = b * block_rows + r;
                let x = xs.point(i);
                for (j, out) in row.iter_mut().enumerate() {
                    let c = spec.cost(i, x, j, ys.point(j));
                    if !c.is_finite() {
                        return Err(Error::DistortionOverflow { row: i, col: j });
                    }
                    *out = c;
                }
            }
            Ok(())
        })?;
    Ok(CostMatrix {
        rows: m,
        cols: n,
        data,
    })
}

/// `d rho(x, y) / dy` as a free function.
pub fn distortion_grad_y(spec: &DistortionSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    spec.grad_y(x, y)
}
