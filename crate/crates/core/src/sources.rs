//! Synthetic sources with known rate-distortion behaviour.
//!
//! A convolved source is `mu = alpha * N(0, sigma2 I)`. Under the
//! half-squared distortion and for `lambda * sigma2 >= 1` its optimal
//! reproduction is `alpha * N(0, sigma2 - 1/lambda)`, which pins down one
//! segment of the R-D curve in terms of the differential entropy of `mu`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{require_positive, Error, Result};
use crate::measures::{DiscreteMeasure, RngSeed, WeightedSampler};
use crate::ratefn::logsumexp;

const SAMPLE_CHUNK: usize = 4096;
const MC_ENTROPY_DRAWS: usize = 1_000_000;
const STREAM_SOURCE: u64 = 11;
const STREAM_REPRO: u64 = 12;

/// The noiseless part of a convolved source.
#[derive(Clone, Debug, PartialEq)]
pub enum Alpha {
    Measure(DiscreteMeasure),
    /// Uniform measure on the sphere of the given radius centred at the
    /// origin. In one dimension this is `{-r, r}` with equal mass; in two it
    /// is the circle.
    UnitSphere {
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvolvedSourceSpec {
    pub alpha: Alpha,
    pub sigma2: f64,
    pub dim: usize,
}

impl ConvolvedSourceSpec {
    pub fn new(alpha: Alpha, sigma2: f64, dim: usize) -> Result<Self> {
        require_positive("sigma2", sigma2)?;
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        match &alpha {
            Alpha::Measure(m) if m.dim() != dim => {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                })
            }
            Alpha::UnitSphere { radius } if !(*radius >= 0.0 && radius.is_finite()) => {
                return Err(Error::InvalidParameter {
                    name: "radius",
                    reason: format!("must be nonnegative and finite, got {radius}"),
                })
            }
            _ => {}
        }
        Ok(Self { alpha, sigma2, dim })
    }

    /// `N(0, sigma2 I_d)`.
    pub fn gaussian(sigma2: f64, dim: usize) -> Result<Self> {
        Self::new(
            Alpha::Measure(DiscreteMeasure::dirac(&vec![0.0; dim])?),
            sigma2,
            dim,
        )
    }

    /// Uniform measure on the circle of the given radius plus isotropic noise.
    pub fn circle(radius: f64, sigma2: f64) -> Result<Self> {
        Self::sphere(radius, sigma2, 2)
    }

    pub fn sphere(radius: f64, sigma2: f64, dim: usize) -> Result<Self> {
        Self::new(Alpha::UnitSphere { radius }, sigma2, dim)
    }

    /// Equal-weight mixture of `N(-1, sigma2)` and `N(1, sigma2)`.
    pub fn two_point(sigma2: f64) -> Result<Self> {
        Self::new(
            Alpha::Measure(DiscreteMeasure::uniform(vec![-1.0, 1.0], 1)?),
            sigma2,
            1,
        )
    }

    /// Smallest multiplier covered by the analytic segment.
    pub fn lambda_min(&self) -> f64 {
        1.0 / self.sigma2
    }

    fn check_segment(&self, lambda: f64) -> Result<f64> {
        require_positive("lambda", lambda)?;
        let product = lambda * self.sigma2;
        if product < 1.0 - 1e-12 {
            return Err(Error::OutOfSegment { lambda, product });
        }
        // reproduction variance; exactly zero at the segment's end point
        Ok(if product <= 1.0 + 1e-12 {
            0.0
        } else {
            self.sigma2 - 1.0 / lambda
        })
    }
}

/// Draws from `alpha * N(0, variance I)`.
struct MixtureSampler<'a> {
    alpha: &'a Alpha,
    weights: Option<WeightedSampler>,
    std: f64,
    dim: usize,
}

impl<'a> MixtureSampler<'a> {
    fn new(alpha: &'a Alpha, variance: f64, dim: usize) -> Self {
        Self {
            weights: match alpha {
                Alpha::Measure(m) => Some(WeightedSampler::new(m)),
                Alpha::UnitSphere { .. } => None,
            },
            alpha,
            std: variance.sqrt(),
            dim,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let start = out.len();
        match self.alpha {
            Alpha::Measure(m) => {
                let k = self
                    .weights
                    .as_ref()
                    .expect("measure sampler")
                    .sample_index(rng);
                out.extend_from_slice(m.point(k));
            }
            Alpha::UnitSphere { radius } => match self.dim {
                1 => out.push(if rng.random::<bool>() {
                    *radius
                } else {
                    -*radius
                }),
                2 => {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    out.extend([radius * theta.cos(), radius * theta.sin()]);
                }
                d => loop {
                    let v: Vec<f64> = (0..d)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        out.extend(v.iter().map(|x| radius * x / norm));
                        break;
                    }
                },
            },
        }
        if self.std > 0.0 {
            for v in &mut out[start..] {
                *v += self.std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    /// `m` draws as a flat row-major vector. Chunks use their own streams so
    /// the result does not depend on the thread count.
    fn draw_many(&self, m: usize, seed: RngSeed) -> Vec<f64> {
        let chunks: Vec<Vec<f64>> = (0..m.div_ceil(SAMPLE_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut rng = seed.fork(c as u64).rng();
                let count = SAMPLE_CHUNK.min(m - c * SAMPLE_CHUNK);
                let mut out = Vec::with_capacity(count * self.dim);
                for _ in 0..count {
                    self.draw(&mut rng, &mut out);
                }
                out
            })
            .collect();
        chunks.concat()
    }
}

fn uniform_from_flat(points: Vec<f64>, dim: usize) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(points, dim)
}

/// `m` i.i.d. draws `X = Y + N(0, sigma2 I)` with `Y ~ alpha`, as a uniform
/// empirical measure.
pub fn sample_convolved(
    spec: &ConvolvedSourceSpec,
    m: usize,
    seed: RngSeed,
) -> Result<DiscreteMeasure> {
    if m == 0 {
        return Err(Error::InvalidBatch);
    }
    let sampler = MixtureSampler::new(&spec.alpha, spec.sigma2, spec.dim);
    uniform_from_flat(sampler.draw_many(m, seed), spec.dim)
}

/// `m` draws from the optimal reproduction `alpha * N(0, sigma2 - 1/lambda)`.
pub fn sample_alpha_lambda(
    spec: &ConvolvedSourceSpec,
    lambda: f64,
    m: usize,
    seed: RngSeed,
) -> Result<DiscreteMeasure> {
    let variance = spec.check_segment(lambda)?;
    if m == 0 {
        return Err(Error::InvalidBatch);
    }
    let sampler = MixtureSampler::new(&spec.alpha, variance, spec.dim);
    uniform_from_flat(sampler.draw_many(m, seed), spec.dim)
}

/// `ln Gamma(d / 2)` for a positive integer `d`.
fn ln_gamma_half(d: usize) -> f64 {
    // Gamma(1) = 1, Gamma(1/2) = sqrt(pi), Gamma(x + 1) = x Gamma(x)
    let (mut acc, mut x) = if d % 2 == 0 {
        (0.0, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    while x + 0.5 < d as f64 / 2.0 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// `ln E[exp(kappa * u_1)]` for `u` uniform on the unit sphere in `R^d`,
/// `kappa >= 0`. For `d = 2` this is `ln I_0(kappa)`; for `d = 3` it is
/// `ln(sinh(kappa) / kappa)`.
pub fn ln_sphere_mgf(d: usize, kappa: f64) -> f64 {
    let kappa = kappa.abs();
    if kappa == 0.0 {
        return 0.0;
    }
    if d == 1 {
        // ln cosh
        return kappa + (-2.0 * kappa).exp().ln_1p() - std::f64::consts::LN_2;
    }
    let half_d = d as f64 / 2.0;
    let switch = 50.0_f64.max((d * d) as f64);
    if kappa <= switch {
        // sum_k (kappa^2 / 4)^k Gamma(d/2) / (k! Gamma(k + d/2)), in logs
        let step = 2.0 * (kappa / 2.0).ln();
        let mut ln_term = 0.0;
        let mut max = 0.0_f64;
        let mut terms = vec![0.0];
        for k in 1.. {
            let k = k as f64;
            ln_term += step - k.ln() - (k - 1.0 + half_d).ln();
            terms.push(ln_term);
            max = max.max(ln_term);
            // terms rise until k ~ kappa / 2 and then fall off
            if ln_term < max - 40.0 {
                break;
            }
        }
        logsumexp(&terms)
    } else {
        // I_nu(kappa) ~ e^kappa / sqrt(2 pi kappa) sum_k (-1)^k a_k / kappa^k
        let nu = half_d - 1.0;
        let mu4 = 4.0 * nu * nu;
        let mut term = 1.0_f64;
        let mut sum = 1.0_f64;
        for k in 1..60 {
            let kf = k as f64;
            let next = -term * (mu4 - (2.0 * kf - 1.0).powi(2)) / (8.0 * kf * kappa);
            if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
                sum += next;
                break;
            }
            term = next;
            sum += term;
        }
        let ln_i = kappa - 0.5 * (std::f64::consts::TAU * kappa).ln() + sum.ln();
        ln_gamma_half(d) + nu * (2.0 / kappa).ln() + ln_i
    }
}

/// Log density of `alpha * N(0, variance I)` at `x`.
fn ln_mixture_density(alpha: &Alpha, variance: f64, x: &[f64]) -> f64 {
    match alpha {
        Alpha::Measure(m) => {
            let norm = -0.5 * x.len() as f64 * (std::f64::consts::TAU * variance).ln();
            let logits: Vec<f64> = m
                .iter()
                .map(|(a, w)| {
                    let sq: f64 = a.iter().zip(x).map(|(a, x)| (a - x) * (a - x)).sum();
                    w.ln() - sq / (2.0 * variance)
                })
                .collect();
            norm + logsumexp(&logits)
        }
        Alpha::UnitSphere { radius } => {
            let rho = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            radial_ln_density(*radius, variance, x.len(), rho)
        }
    }
}

/// Log density of the noisy sphere at any point of norm `rho`.
fn radial_ln_density(radius: f64, variance: f64, d: usize, rho: f64) -> f64 {
    -0.5 * d as f64 * (std::f64::consts::TAU * variance).ln()
        - (rho * rho + radius * radius) / (2.0 * variance)
        + ln_sphere_mgf(d, radius * rho / variance)
}

/// Log density of `mu` at `x`.
pub fn source_ln_density(spec: &ConvolvedSourceSpec, x: &[f64]) -> Result<f64> {
    if x.len() != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            got: x.len(),
        });
    }
    Ok(ln_mixture_density(&spec.alpha, spec.sigma2, x))
}

/// How a rate value was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateMethod {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyEstimate {
    pub value: f64,
    /// Standard error for Monte Carlo estimates.
    pub stderr: Option<f64>,
    pub how: RateMethod,
}

/// Adaptive Simpson on `[a, b]`, started from `panels` equal pieces.
fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            recurse(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 30)
        })
        .sum()
}

fn neg_p_ln_p(ln_p: f64) -> f64 {
    if ln_p == f64::NEG_INFINITY {
        0.0
    } else {
        -ln_p.exp() * ln_p
    }
}

/// Differential entropy `h(mu)` in nats.
///
/// A single-atom `alpha` uses the Gaussian closed form. Spheres are radially
/// symmetric and reduce to a one-dimensional integral in any dimension.
/// Other `alpha` use adaptive quadrature in one dimension, a Simpson tensor
/// grid in two, and Monte Carlo with `10^6` draws (fixed stream) above.
pub fn differential_entropy(spec: &ConvolvedSourceSpec) -> Result<EntropyEstimate> {
    let s2 = spec.sigma2;
    let s = s2.sqrt();
    let d = spec.dim;
    let quad = |value| EntropyEstimate {
        value,
        stderr: None,
        how: RateMethod::Quadrature,
    };
    match &spec.alpha {
        Alpha::Measure(m) if m.len() == 1 => Ok(EntropyEstimate {
            value: 0.5 * d as f64 * (std::f64::consts::TAU * std::f64::consts::E * s2).ln(),
            stderr: None,
            how: RateMethod::ClosedForm,
        }),
        Alpha::UnitSphere { radius } => {
            let r = *radius;
            // surface area of the unit sphere in R^d
            let ln_area = std::f64::consts::LN_2 + 0.5 * d as f64 * std::f64::consts::PI.ln()
                - ln_gamma_half(d);
            let lo = (r - 8.0 * s).max(0.0);
            let hi = r + s * (8.0 + (d as f64).sqrt());
            let f = |rho: f64| {
                if rho <= 0.0 && d > 1 {
                    return 0.0;
                }
                let ln_p = radial_ln_density(r, s2, d, rho);
                (ln_area + (d as f64 - 1.0) * rho.max(f64::MIN_POSITIVE).ln() + ln_p).exp() * -ln_p
            };
            let panels = (((hi - lo) / s).ceil() as usize * 4).max(16);
            Ok(quad(adaptive_simpson(&f, lo, hi, panels, 1e-11)))
        }
        Alpha::Measure(m) if d == 1 => {
            let (min, max) = m
                .points()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| {
                    (a.min(p), b.max(p))
                });
            let (lo, hi) = (min - 8.0 * s, max + 8.0 * s);
            let f = |x: f64| neg_p_ln_p(ln_mixture_density(&spec.alpha, s2, &[x]));
            let panels = (((hi - lo) / s).ceil() as usize * 4).max(16);
            Ok(quad(adaptive_simpson(&f, lo, hi, panels, 1e-11)))
        }
        Alpha::Measure(m) if d == 2 => {
            let mut bounds = [(f64::INFINITY, f64::NEG_INFINITY); 2];
            for p in m.points().chunks_exact(2) {
                for k in 0..2 {
                    bounds[k] = (bounds[k].0.min(p[k]), bounds[k].1.max(p[k]));
                }
            }
            let h = s / 16.0;
            let axis = |(min, max): (f64, f64)| {
                let (lo, hi) = (min - 8.0 * s, max + 8.0 * s);
                let cells = (((hi - lo) / h).ceil() as usize).next_multiple_of(2);
                let step = (hi - lo) / cells as f64;
                let nodes: Vec<(f64, f64)> = (0..=cells)
                    .map(|k| {
                        let w = if k == 0 || k == cells {
                            1.0
                        } else if k % 2 == 1 {
                            4.0
                        } else {
                            2.0
                        };
                        (lo + k as f64 * step, w * step / 3.0)
                    })
                    .collect();
                nodes
            };
            let (xs, ys) = (axis(bounds[0]), axis(bounds[1]));
            let total: f64 = xs
                .par_iter()
                .map(|&(x, wx)| {
                    ys.iter()
                        .map(|&(y, wy)| {
                            wx * wy * neg_p_ln_p(ln_mixture_density(&spec.alpha, s2, &[x, y]))
                        })
                        .sum::<f64>()
                })
                .collect::<Vec<_>>()
                .iter()
                .sum();
            Ok(quad(total))
        }
        Alpha::Measure(_) => {
            let draws =
                sample_convolved(spec, MC_ENTROPY_DRAWS, RngSeed::new(0).fork(STREAM_SOURCE))?;
            let values: Vec<f64> = draws
                .points()
                .par_chunks_exact(d)
                .map(|x| -ln_mixture_density(&spec.alpha, s2, x))
                .collect();
            let (mean, se) = mean_and_stderr(&values);
            Ok(EntropyEstimate {
                value: mean,
                stderr: Some(se),
                how: RateMethod::MonteCarlo,
            })
        }
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// The optimal reproduction `alpha * N(0, variance I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NuStar {
    pub alpha: Alpha,
    pub variance: f64,
}

/// One exactly known point of the R-D curve under the half-squared distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticRDSegment {
    pub lambda: f64,
    pub nu_star: NuStar,
    pub distortion: f64,
    pub rate: f64,
    pub rate_stderr: Option<f64>,
    pub how: RateMethod,
}

impl AnalyticRDSegment {
    /// `L_BA(nu*) = rate + lambda * distortion`.
    pub fn loss(&self) -> f64 {
        self.rate + self.lambda * self.distortion
    }
}

/// The analytic segment point at `lambda >= 1 / sigma2`:
/// `D = d / (2 lambda)` and `R = h(mu) - (d/2) ln(2 pi e / lambda)`.
pub fn rd_segment(spec: &ConvolvedSourceSpec, lambda: f64) -> Result<AnalyticRDSegment> {
    let variance = spec.check_segment(lambda)?;
    let h = differential_entropy(spec)?;
    let d = spec.dim as f64;
    Ok(AnalyticRDSegment {
        lambda,
        nu_star: NuStar {
            alpha: spec.alpha.clone(),
            variance,
        },
        distortion: d / (2.0 * lambda),
        rate: h.value - 0.5 * d * (std::f64::consts::TAU * std::f64::consts::E / lambda).ln(),
        rate_stderr: h.stderr,
        how: h.how,
    })
}

/// Shannon's `R(D) = 1/2 ln(sigma2 / D)` for a Gaussian under squared error.
/// Half-squared estimates convert with `D = 2 * D_half`. Zero for `D >= sigma2`.
pub fn gaussian_rd_oracle(sigma2: f64, d: f64) -> Result<f64> {
    require_positive("sigma2", sigma2)?;
    require_positive("D", d)?;
    Ok(if d >= sigma2 {
        0.0
    } else {
        0.5 * (sigma2 / d).ln()
    })
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// `R(D) = h(p) - h(D)` for a Bernoulli(p) source under Hamming distortion;
/// zero for `D >= min(p, 1 - p)`.
pub fn binary_rd_oracle(p: f64, d: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter {
            name: "p",
            reason: format!("must lie in (0, 1), got {p}"),
        });
    }
    if !(d >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "D",
            reason: format!("must be nonnegative, got {d}"),
        });
    }
    Ok(if d >= p.min(1.0 - p) {
        0.0
    } else {
        binary_entropy(p) - binary_entropy(d)
    })
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Sample-mean estimate of `OPT = L_BA(nu*)` with `m_eval` source draws and
/// `n_eval` draws from `nu*`.
///
/// Each source point contributes `-ln((1/n) sum_j exp(-lambda |x - y_j|^2 / 2))`.
/// By Jensen the inner average underestimates the integral in log terms, so
/// the estimate is biased upwards; the bias shrinks like `1 / n_eval`. The
/// reported standard error covers only the outer average.
pub fn opt_loss_mc(
    spec: &ConvolvedSourceSpec,
    lambda: f64,
    m_eval: usize,
    n_eval: usize,
    seed: RngSeed,
) -> Result<McEstimate> {
    if m_eval < 2 || n_eval == 0 {
        return Err(Error::InvalidParameter {
            name: "m_eval",
            reason: "need at least two source draws and one reproduction draw".into(),
        });
    }
    let xs = sample_convolved(spec, m_eval, seed.fork(STREAM_SOURCE))?;
    let ys = sample_alpha_lambda(spec, lambda, n_eval, seed.fork(STREAM_REPRO))?;
    let d = spec.dim;
    let ln_n = (n_eval as f64).ln();
    let ys = ys.points();
    let phis: Vec<f64> = xs
        .points()
        .par_chunks_exact(d)
        .map(|x| {
            // streaming logsumexp of -lambda |x - y|^2 / 2
            let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
            for y in ys.chunks_exact(d) {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let a = -0.5 * lambda * sq;
                if a <= max {
                    if a > max - 40.0 {
                        sum += (a - max).exp();
                    }
                } else {
                    sum = sum * (max - a).exp() + 1.0;
                    max = a;
                }
            }
            ln_n - (max + sum.ln())
        })
        .collect();
    let (estimate, stderr) = mean_and_stderr(&phis);
    Ok(McEstimate { estimate, stderr })
}

/// `OPT` with the inner integral done exactly and only the outer expectation
/// sampled, so the estimate is unbiased.
///
/// With `s2 = sigma2 - 1/lambda`, Gaussian convolution gives
/// `int exp(-lambda |x - y|^2 / 2) nu*(dy) = (1 + lambda s2)^(-d/2) int exp(-l' |x - a|^2 / 2) alpha(da)`
/// with `l' = lambda / (1 + lambda s2)`.
pub fn opt_loss_semi_analytic(
    spec: &ConvolvedSourceSpec,
    lambda: f64,
    m_eval: usize,
    seed: RngSeed,
) -> Result<McEstimate> {
    let s2 = spec.check_segment(lambda)?;
    if m_eval < 2 {
        return Err(Error::InvalidBatch);
    }
    let xs = sample_convolved(spec, m_eval, seed.fork(STREAM_SOURCE))?;
    let d = spec.dim;
    let shrink = 1.0 + lambda * s2;
    let l2 = lambda / shrink;
    let phis: Vec<f64> = xs
        .points()
        .par_chunks_exact(d)
        .map(|x| 0.5 * d as f64 * shrink.ln() - ln_gaussian_integral(&spec.alpha, l2, x))
        .collect();
    let (estimate, stderr) = mean_and_stderr(&phis);
    Ok(McEstimate { estimate, stderr })
}

/// `ln int exp(-l |x - a|^2 / 2) alpha(da)`.
fn ln_gaussian_integral(alpha: &Alpha, l: f64, x: &[f64]) -> f64 {
    match alpha {
        Alpha::Measure(m) => {
            let logits: Vec<f64> = m
                .iter()
                .map(|(a, w)| {
                    let sq: f64 = a.iter().zip(x).map(|(a, x)| (a - x) * (a - x)).sum();
                    w.ln() - 0.5 * l * sq
                })
                .collect();
            logsumexp(&logits)
        }
        Alpha::UnitSphere { radius } => {
            let rho2: f64 = x.iter().map(|v| v * v).sum();
            -0.5 * l * (rho2 + radius * radius) + ln_sphere_mgf(x.len(), l * radius * rho2.sqrt())
        }
    }
}
