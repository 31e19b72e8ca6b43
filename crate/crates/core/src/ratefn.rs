//! The rate functional `L_BA(nu)`, its first variation and Wasserstein
//! gradient, and the (distortion, rate) upper-bound estimates.
//!
//! Everything here is built on one row pass over the source points. For a
//! source point `x_i` the pass forms the log-domain row
//!
//! ```text
//! a_ij = ln w_j - lambda * rho(x_i, y_j),    phi_i = -logsumexp_j a_ij
//! ```
//!
//! and from it the kernel `K_ij = exp(a_ij + phi_i)` and the density ratio
//! `r_ij = exp(-lambda * rho(x_i, y_j) + phi_i) = K_ij / w_j`. The loss, the
//! first variation `psi_j = -sum_i mu_i r_ij`, the gradient, the distortion
//! estimate and the kernel marginal are all sums of these per-row terms, so a
//! single pass produces whichever of them the caller asks for.
//!
//! Rows are processed in fixed-size chunks and the chunk partials are added in
//! chunk order, so results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{sq_dist, DistortionKind, DistortionSpec};
use crate::error::{require_positive, Error, Result};
use crate::measures::DiscreteMeasure;

/// Source rows per reduction chunk. Part of the numerical contract: changing
/// it changes the summation order.
pub const CHUNK_ROWS: usize = 256;

/// Slack allowed above `ln(n)` for rate estimates of uniform-weight measures.
pub const CEILING_SLACK: f64 = 1e-9;

/// Below this weight the density ratio is recomputed from the cost instead
/// of dividing the kernel by the weight.
const TINY_WEIGHT: f64 = 1e-250;

/// Largest negative rate accepted as rounding noise.
pub const NEGATIVE_RATE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    AtNuAtoms,
    AtMuPoints,
}

/// Potential values at the atoms of one of the two measures, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialVector {
    pub values: Vec<f64>,
    pub anchor: Anchor,
}

/// One vector in R^d per reproduction atom, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleGradient {
    data: Vec<f64>,
    dim: usize,
}

impl ParticleGradient {
    pub fn new(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Self { data, dim }
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self::new(vec![0.0; n * dim], dim)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// `sum_j weights_j * |g_j|^2`
    pub fn weighted_norm_sq(&self, weights: &[f64]) -> f64 {
        self.rows()
            .zip(weights)
            .map(|(g, w)| w * g.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Solver bookkeeping carried along with an [`RDPoint`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub solver: String,
    pub iterations: usize,
    pub wall_ms: f64,
}

/// One point of an estimated R-D upper bound. Rate and loss are in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub lambda: f64,
    pub distortion: f64,
    pub rate: f64,
    pub loss: f64,
    pub n_atoms: usize,
    pub meta: RunMeta,
}

impl RDPoint {
    /// `ln(n_atoms)`: the most rate an `n`-atom reproduction can certify.
    pub fn rate_ceiling(&self) -> f64 {
        (self.n_atoms as f64).ln()
    }

    pub fn exceeds_ceiling(&self) -> bool {
        self.rate > self.rate_ceiling() + CEILING_SLACK
    }

    pub fn near_ceiling(&self, margin: f64) -> bool {
        self.rate >= self.rate_ceiling() - margin
    }
}

/// Which quantities a [`gibbs_pass`] should accumulate. The loss is always
/// computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Request {
    pub phi: bool,
    pub psi: bool,
    pub gradient: bool,
    pub distortion: bool,
    pub marginal: bool,
}

impl Request {
    pub fn loss_only() -> Self {
        Self::default()
    }

    pub fn gradient() -> Self {
        Self {
            gradient: true,
            ..Self::default()
        }
    }
}

/// Output of one row pass; fields not requested are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsPass {
    /// `sum_i mu_i phi_i`
    pub loss: f64,
    /// `phi_i` at each source point.
    pub phi: Option<Vec<f64>>,
    /// First variation at each reproduction atom.
    pub psi: Option<Vec<f64>>,
    /// Wasserstein gradient at each reproduction atom.
    pub gradient: Option<ParticleGradient>,
    /// `sum_i mu_i sum_j K_ij rho_ij`
    pub distortion: Option<f64>,
    /// `sum_i mu_i K_ij`
    pub marginal: Option<Vec<f64>>,
}

/// `ln sum_j exp(values_j)` with max subtraction. Empty or all `-inf` input
/// gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Kernel row for one source point: fills `costs` with `rho(x_i, y_j)` and
/// `kernel` with `K_ij = w_j exp(-lambda rho_ij) / Z_i`, and returns `ln Z_i`.
///
/// `log_w` holds `ln w_j`. One exponential per pair. The Blahut-Arimoto
/// solver and the estimators share this code path.
#[inline]
pub(crate) fn kernel_row(
    spec: &DistortionSpec,
    lambda: f64,
    i: usize,
    x: &[f64],
    nu: &DiscreteMeasure,
    log_w: &[f64],
    costs: &mut [f64],
    kernel: &mut [f64],
) -> Result<f64> {
    let max = match spec.kind() {
        DistortionKind::HalfSquaredEuclidean => fill_log_kernel(
            |_, y| 0.5 * sq_dist(x, y),
            i,
            nu,
            lambda,
            log_w,
            costs,
            kernel,
        )?,
        DistortionKind::SquaredEuclidean => {
            fill_log_kernel(|_, y| sq_dist(x, y), i, nu, lambda, log_w, costs, kernel)?
        }
        _ => fill_log_kernel(
            |j, y| spec.cost(i, x, j, y),
            i,
            nu,
            lambda,
            log_w,
            costs,
            kernel,
        )?,
    };
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateSupport { row: i });
    }
    let mut total = 0.0;
    for a in kernel.iter_mut() {
        *a = (*a - max).exp();
        total += *a;
    }
    let scale = 1.0 / total;
    kernel.iter_mut().for_each(|k| *k *= scale);
    let lse = max + total.ln();
    if !lse.is_finite() {
        return Err(Error::Numeric {
            index: i,
            what: "row normalizer is not finite",
        });
    }
    Ok(lse)
}

/// Writes `ln w_j - lambda * rho_ij` and returns its maximum. Generic over the
/// cost so the common kinds get a dispatch-free loop.
#[inline(always)]
fn fill_log_kernel<F: Fn(usize, &[f64]) -> f64>(
    cost: F,
    i: usize,
    nu: &DiscreteMeasure,
    lambda: f64,
    log_w: &[f64],
    costs: &mut [f64],
    kernel: &mut [f64],
) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    let atoms = nu.points().chunks_exact(nu.dim());
    for (j, (((c, a), y), lw)) in costs
        .iter_mut()
        .zip(kernel.iter_mut())
        .zip(atoms)
        .zip(log_w)
        .enumerate()
    {
        let rho = cost(j, y);
        if !rho.is_finite() {
            return Err(Error::DistortionOverflow { row: i, col: j });
        }
        *c = rho;
        *a = lw - lambda * rho;
        max = max.max(*a);
    }
    Ok(max)
}

/// `ln w_j` for every atom.
pub(crate) fn log_weights(nu: &DiscreteMeasure) -> Vec<f64> {
    nu.weights().iter().map(|w| w.ln()).collect()
}

struct Partial {
    loss: f64,
    distortion: f64,
    phi: Vec<f64>,
    psi: Vec<f64>,
    marginal: Vec<f64>,
    grad: Vec<f64>,
}

/// Runs the fused row pass of `mu` against `nu` at multiplier `lambda`.
pub fn gibbs_pass(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
    req: Request,
) -> Result<GibbsPass> {
    require_positive("lambda", lambda)?;
    spec.check_compatible(mu, nu)?;
    if req.gradient {
        spec.require_differentiable()?;
    }
    let (m, n, d) = (mu.len(), nu.len(), nu.dim());
    let chunks = m.div_ceil(CHUNK_ROWS);
    let log_w = log_weights(nu);

    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK_ROWS;
            let end = (start + CHUNK_ROWS).min(m);
            let mut p = Partial {
                loss: 0.0,
                distortion: 0.0,
                phi: if req.phi {
                    Vec::with_capacity(end - start)
                } else {
                    Vec::new()
                },
                psi: if req.psi { vec![0.0; n] } else { Vec::new() },
                marginal: if req.marginal {
                    vec![0.0; n]
                } else {
                    Vec::new()
                },
                grad: if req.gradient {
                    vec![0.0; n * d]
                } else {
                    Vec::new()
                },
            };
            let mut costs = vec![0.0; n];
            let mut kernel = vec![0.0; n];
            for i in start..end {
                let x = mu.point(i);
                let mu_i = mu.weight(i);
                let lse = kernel_row(spec, lambda, i, x, nu, &log_w, &mut costs, &mut kernel)?;
                let phi = -lse;
                p.loss += mu_i * phi;
                if req.phi {
                    p.phi.push(phi);
                }
                if !(req.psi || req.gradient || req.distortion || req.marginal) {
                    continue;
                }
                let mut row_distortion = 0.0;
                for j in 0..n {
                    // r_ij = exp(-lambda rho_ij + phi_i) = K_ij / w_j
                    let k = kernel[j];
                    let w = nu.weight(j);
                    let ratio = if w >= TINY_WEIGHT {
                        k / w
                    } else {
                        (-lambda * costs[j] + phi).exp()
                    };
                    if !ratio.is_finite() {
                        return Err(Error::Numeric {
                            index: j,
                            what: "density ratio overflow at a low-weight atom",
                        });
                    }
                    if req.distortion {
                        row_distortion += k * costs[j];
                    }
                    if req.psi {
                        p.psi[j] -= mu_i * ratio;
                    }
                    if req.marginal {
                        p.marginal[j] += mu_i * k;
                    }
                    if req.gradient {
                        spec.add_grad_y(
                            x,
                            nu.point(j),
                            mu_i * ratio * lambda,
                            &mut p.grad[j * d..(j + 1) * d],
                        );
                    }
                }
                p.distortion += mu_i * row_distortion;
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0;
    let mut distortion = 0.0;
    let mut phi = Vec::with_capacity(if req.phi { m } else { 0 });
    let mut psi = vec![0.0; if req.psi { n } else { 0 }];
    let mut marginal = vec![0.0; if req.marginal { n } else { 0 }];
    let mut grad = vec![0.0; if req.gradient { n * d } else { 0 }];
    for p in partials {
        loss += p.loss;
        distortion += p.distortion;
        phi.extend_from_slice(&p.phi);
        add_into(&mut psi, &p.psi);
        add_into(&mut marginal, &p.marginal);
        add_into(&mut grad, &p.grad);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            what: "rate functional is not finite",
        });
    }
    if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            index: j / d,
            what: "gradient is not finite",
        });
    }
    Ok(GibbsPass {
        loss,
        phi: req.phi.then_some(phi),
        psi: req.psi.then_some(psi),
        gradient: req.gradient.then(|| ParticleGradient::new(grad, d)),
        distortion: req.distortion.then_some(distortion),
        marginal: req.marginal.then_some(marginal),
    })
}

fn add_into(acc: &mut [f64], part: &[f64]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// `L_BA(nu) = sum_i mu_i phi(x_i)` together with `phi` at the source points.
///
/// For discrete `nu` the inner integral is an exact finite sum.
pub fn rate_functional_eval(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<(f64, PotentialVector)> {
    let pass = gibbs_pass(
        mu,
        nu,
        spec,
        lambda,
        Request {
            phi: true,
            ..Request::default()
        },
    )?;
    Ok((
        pass.loss,
        PotentialVector {
            values: pass.phi.expect("requested"),
            anchor: Anchor::AtMuPoints,
        },
    ))
}

/// First variation of `L_BA` at `nu`, evaluated at each atom:
/// `psi(y_j) = -sum_i mu_i exp(-lambda rho(x_i, y_j)) / sum_k w_k exp(-lambda rho(x_i, y_k))`.
pub fn first_variation_ba(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<PotentialVector> {
    let pass = gibbs_pass(
        mu,
        nu,
        spec,
        lambda,
        Request {
            psi: true,
            ..Request::default()
        },
    )?;
    Ok(PotentialVector {
        values: pass.psi.expect("requested"),
        anchor: Anchor::AtNuAtoms,
    })
}

/// Wasserstein gradient of `L_BA` at each atom of `nu` (the Euclidean
/// gradient of the first variation).
pub fn wgd_gradient_ba(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<ParticleGradient> {
    Ok(gibbs_pass(mu, nu, spec, lambda, Request::gradient())?
        .gradient
        .expect("requested"))
}

/// Upper-bound estimate `(D, R)` for the kernel induced by `nu`.
///
/// `R` is computed as `L - lambda * D`. For uniform-weight `nu` the rate can
/// not exceed `ln(n)`; a larger value there is reported as an invariant
/// violation. Non-uniform measures may legitimately exceed it and are passed
/// through (see [`RDPoint::exceeds_ceiling`]).
pub fn rd_point_from_nu(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<RDPoint> {
    let pass = gibbs_pass(
        mu,
        nu,
        spec,
        lambda,
        Request {
            distortion: true,
            ..Request::default()
        },
    )?;
    let distortion = pass.distortion.expect("requested");
    let rate = pass.loss - lambda * distortion;
    if rate < -NEGATIVE_RATE_SLACK {
        return Err(Error::Numeric {
            index: 0,
            what: "negative rate estimate",
        });
    }
    let point = RDPoint {
        lambda,
        distortion,
        rate,
        loss: pass.loss,
        n_atoms: nu.len(),
        meta: RunMeta::default(),
    };
    if nu.has_uniform_weights() && point.exceeds_ceiling() {
        return Err(Error::InvariantViolation(format!(
            "rate {} exceeds ln({}) for a uniform-weight reproduction",
            point.rate, point.n_atoms
        )));
    }
    Ok(point)
}
