//! Blahut-Arimoto on a fixed reproduction support.
//!
//! Each iteration recomputes the conditional kernel from the current
//! reproduction weights and then replaces the weights by the kernel's second
//! marginal. Atom locations never move.

use rayon::prelude::*;

use crate::distortion::DistortionSpec;
use crate::error::{require_positive, Error, Result};
use crate::measures::DiscreteMeasure;
use crate::ratefn::{kernel_row, log_weights, CHUNK_ROWS};

/// Default stopping threshold on the absolute loss decrease, in nats.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Allowed loss increase per iteration before monotonicity counts as broken,
/// relative to `max(1, |loss|)`.
pub const MONOTONE_SLACK: f64 = 1e-12;

/// Row-stochastic kernel from source points to reproduction atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalKernel {
    probs: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl ConditionalKernel {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.cols..(i + 1) * self.cols]
    }
}

/// Kernel update: row `i` is the softmax over `j` of `ln w_j - lambda rho(x_i, y_j)`.
pub fn ba_kernel_update(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<ConditionalKernel> {
    kernel_update_with_loss(mu, nu, spec, lambda).map(|(k, _)| k)
}

/// Kernel update that also returns `L_BA(nu)` (the row normalizers give it
/// for free).
pub(crate) fn kernel_update_with_loss(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<(ConditionalKernel, f64)> {
    require_positive("lambda", lambda)?;
    spec.check_compatible(mu, nu)?;
    let (m, n) = (mu.len(), nu.len());
    let log_w = log_weights(nu);
    let mut probs = vec![0.0; m * n];
    let losses: Vec<f64> = probs
        .par_chunks_mut(CHUNK_ROWS * n)
        .enumerate()
        .map(|(c, block)| {
            let mut costs = vec![0.0; n];
            let mut loss = 0.0;
            for (r, row) in block.chunks_exact_mut(n).enumerate() {
                let i = c * CHUNK_ROWS + r;
                let lse = kernel_row(spec, lambda, i, mu.point(i), nu, &log_w, &mut costs, row)?;
                loss -= mu.weight(i) * lse;
            }
            Ok(loss)
        })
        .collect::<Result<_>>()?;
    Ok((
        ConditionalKernel {
            probs,
            rows: m,
            cols: n,
        },
        losses.iter().sum(),
    ))
}

/// Marginal update: atom `j` of `nu` receives weight `sum_i mu_i K(x_i, j)`.
pub fn ba_marginal_update(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    kernel: &ConditionalKernel,
) -> Result<DiscreteMeasure> {
    if kernel.rows != mu.len() || kernel.cols != nu.len() {
        return Err(Error::ShapeMismatch {
            expected_rows: mu.len(),
            expected_cols: nu.len(),
            rows: kernel.rows,
            cols: kernel.cols,
        });
    }
    let n = kernel.cols;
    let partials: Vec<Vec<f64>> = kernel
        .probs
        .par_chunks(CHUNK_ROWS * n)
        .enumerate()
        .map(|(c, block)| {
            let mut acc = vec![0.0; n];
            for (r, row) in block.chunks_exact(n).enumerate() {
                let mu_i = mu.weight(c * CHUNK_ROWS + r);
                for (a, k) in acc.iter_mut().zip(row) {
                    *a += mu_i * k;
                }
            }
            acc
        })
        .collect();
    let mut weights = vec![0.0; n];
    for p in partials {
        for (w, v) in weights.iter_mut().zip(p) {
            *w += v;
        }
    }
    nu.with_weights(weights)
}

/// Result of [`ba_solve`].
#[derive(Clone, Debug)]
pub struct BaRun {
    /// Final reproduction measure; same atoms as the initial one.
    pub nu: DiscreteMeasure,
    /// Kernel built from `nu`.
    pub kernel: ConditionalKernel,
    /// `L_BA` of the reproduction measure before each iteration's marginal update.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl BaRun {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Alternates kernel and marginal updates until the loss decrease drops below
/// `tol` or `max_iters` kernel updates have run.
///
/// A loss increase larger than [`MONOTONE_SLACK`] aborts with
/// [`Error::InvariantViolation`].
pub fn ba_solve(
    mu: &DiscreteMeasure,
    nu0: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<BaRun> {
    if max_iters == 0 {
        return Err(Error::InvalidParameter {
            name: "max_iters",
            reason: "must be at least 1".into(),
        });
    }
    let mut nu = nu0.clone();
    let (mut kernel, loss) = kernel_update_with_loss(mu, &nu, spec, lambda)?;
    let mut trace = vec![loss];
    let mut converged = false;
    while trace.len() < max_iters {
        let next_nu = ba_marginal_update(mu, &nu, &kernel)?;
        let (next_kernel, loss) = kernel_update_with_loss(mu, &next_nu, spec, lambda)?;
        let prev = *trace.last().unwrap();
        if loss > prev + MONOTONE_SLACK * prev.abs().max(1.0) {
            return Err(Error::InvariantViolation(format!(
                "Blahut-Arimoto loss increased from {prev} to {loss} at iteration {}",
                trace.len()
            )));
        }
        nu = next_nu;
        kernel = next_kernel;
        trace.push(loss);
        if prev - loss < tol {
            converged = true;
            break;
        }
    }
    Ok(BaRun {
        nu,
        kernel,
        trace,
        converged,
    })
}
