//! Entropic optimal transport between two discrete measures.
//!
//! The coupling is parameterized by dual potentials `(f, g)`:
//!
//! ```text
//! pi_ij = mu_i w_j exp((f_i + g_j - rho_ij) / eps)
//! ```
//!
//! Sinkhorn alternates the two exact half-updates in the log domain. The cost
//! `L_EOT = <pi, rho> + eps KL(pi | mu x nu)` is read off the dual objective,
//! which is stationary at the solution and therefore insensitive to small
//! residual marginal errors.

use rayon::prelude::*;

use crate::distortion::{pairwise_distortion, CostMatrix, DistortionSpec};
use crate::error::{require_positive, Error, Result};
use crate::measures::DiscreteMeasure;
use crate::ratefn::{logsumexp, ParticleGradient};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOptions {
    /// Target for the L1 marginal violation.
    pub tol: f64,
    pub max_iters: usize,
    /// Number of geometric epsilon stages to anneal through before the target
    /// epsilon; `None` solves at the target directly.
    pub eps_scaling_stages: Option<usize>,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            eps_scaling_stages: None,
        }
    }
}

/// Dual potentials on the source points (`f`) and reproduction atoms (`g`).
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// max(L1 row violation, L1 column violation) of the implied coupling.
    pub marginal_violation: f64,
    pub converged: bool,
    /// Row violation after each iteration.
    pub violation_trace: Vec<f64>,
}

/// Solves the entropic OT problem between `mu` and `nu` with regularization `epsilon`.
///
/// Running out of iterations is not an error: the potentials come back with
/// `converged == false` and the violation recorded.
pub fn sinkhorn_solve(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SinkhornPotentials> {
    sinkhorn_solve_with(
        mu,
        nu,
        spec,
        epsilon,
        &SinkhornOptions {
            tol,
            max_iters,
            eps_scaling_stages: None,
        },
        None,
    )
}

/// [`sinkhorn_solve`] with full options and an optional warm start for `g`.
pub fn sinkhorn_solve_with(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    epsilon: f64,
    opts: &SinkhornOptions,
    warm_g: Option<&[f64]>,
) -> Result<SinkhornPotentials> {
    require_positive("epsilon", epsilon)?;
    if !(opts.tol >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: format!("must be nonnegative, got {}", opts.tol),
        });
    }
    let cost = pairwise_distortion(spec, mu, nu)?;
    let problem = Problem::new(mu, nu, cost);
    let mut g = match warm_g {
        Some(g) if g.len() == nu.len() => g.to_vec(),
        Some(g) => {
            return Err(Error::ShapeMismatch {
                expected_rows: nu.len(),
                expected_cols: 1,
                rows: g.len(),
                cols: 1,
            })
        }
        None => vec![0.0; nu.len()],
    };

    let mut spent = 0;
    if let Some(stages) = opts.eps_scaling_stages.filter(|&s| s > 1) {
        let start = problem
            .cost
            .as_slice()
            .iter()
            .copied()
            .fold(0.0, f64::max)
            .max(epsilon);
        let ratio = (start / epsilon).powf(1.0 / (stages - 1) as f64);
        for k in 0..stages - 1 {
            let eps_k = epsilon * ratio.powi((stages - 1 - k) as i32);
            let budget = opts.max_iters.saturating_sub(spent);
            let stage = problem.run(eps_k, opts.tol.max(1e-6), budget, g);
            spent += stage.iterations;
            g = stage.g;
        }
    }
    let mut out = problem.run(
        epsilon,
        opts.tol,
        opts.max_iters.saturating_sub(spent).max(1),
        g,
    );
    out.iterations += spent;
    Ok(out)
}

struct Problem {
    log_mu: Vec<f64>,
    log_w: Vec<f64>,
    cost: CostMatrix,
    cost_t: CostMatrix,
}

impl Problem {
    fn new(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: CostMatrix) -> Self {
        Self {
            log_mu: mu.weights().iter().map(|w| w.ln()).collect(),
            log_w: nu.weights().iter().map(|w| w.ln()).collect(),
            cost_t: cost.transpose(),
            cost,
        }
    }

    /// `f_i = -eps ln sum_j w_j exp((g_j - rho_ij) / eps)`
    fn f_update(&self, g: &[f64], eps: f64) -> Vec<f64> {
        half_update(&self.cost, &self.log_w, g, eps)
    }

    /// `g_j = -eps ln sum_i mu_i exp((f_i - rho_ij) / eps)`
    fn g_update(&self, f: &[f64], eps: f64) -> Vec<f64> {
        half_update(&self.cost_t, &self.log_mu, f, eps)
    }

    fn run(&self, eps: f64, tol: f64, max_iters: usize, g0: Vec<f64>) -> SinkhornPotentials {
        let mut f = self.f_update(&g0, eps);
        let mut g = g0;
        let mut trace = Vec::new();
        let mut converged = false;
        for _ in 0..max_iters {
            g = self.g_update(&f, eps);
            // Columns of (f, g) are now exact; the row sums of (f, g) are
            // mu_i exp((f_i - f'_i) / eps) where f' is the next f-update.
            let next_f = self.f_update(&g, eps);
            let violation = row_violation(&self.log_mu, &f, &next_f, eps);
            trace.push(violation);
            if violation <= tol {
                converged = true;
                break;
            }
            f = next_f;
        }
        let violation = self.violation(&f, &g, eps);
        SinkhornPotentials {
            iterations: trace.len(),
            converged: converged && violation <= tol,
            marginal_violation: violation,
            violation_trace: trace,
            f,
            g,
            epsilon: eps,
        }
    }

    /// Explicit max of the L1 row and column violations.
    fn violation(&self, f: &[f64], g: &[f64], eps: f64) -> f64 {
        let rows = row_violation(&self.log_mu, f, &self.f_update(g, eps), eps);
        let cols = row_violation(&self.log_w, g, &self.g_update(f, eps), eps);
        rows.max(cols)
    }
}

fn half_update(cost: &CostMatrix, log_weights: &[f64], other: &[f64], eps: f64) -> Vec<f64> {
    let n = cost.cols();
    (0..cost.rows())
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, i| {
                for ((b, (&c, &lw)), &o) in buf
                    .iter_mut()
                    .zip(cost.row(i).iter().zip(log_weights))
                    .zip(other)
                {
                    *b = lw + (o - c) / eps;
                }
                -eps * logsumexp(buf)
            },
        )
        .collect()
}

/// `sum_i |mu_i exp((f_i - f'_i) / eps) - mu_i|` computed in log space.
fn row_violation(log_weights: &[f64], f: &[f64], next: &[f64], eps: f64) -> f64 {
    log_weights
        .iter()
        .zip(f.iter().zip(next))
        .map(|(&lw, (&a, &b))| {
            if lw == f64::NEG_INFINITY {
                0.0
            } else {
                lw.exp() * ((a - b) / eps).exp_m1().abs()
            }
        })
        .sum()
}

fn check_potentials(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    epsilon: f64,
    pot: &SinkhornPotentials,
) -> Result<()> {
    let fresh = pot.converged
        && pot.f.len() == mu.len()
        && pot.g.len() == nu.len()
        && (pot.epsilon - epsilon).abs() <= 1e-12 * epsilon;
    if fresh {
        Ok(())
    } else {
        Err(Error::StalePotentials)
    }
}

/// `L_EOT(mu, nu)` assembled from converged potentials.
pub fn eot_cost(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    epsilon: f64,
    pot: &SinkhornPotentials,
) -> Result<f64> {
    require_positive("epsilon", epsilon)?;
    check_potentials(mu, nu, epsilon, pot)?;
    spec.check_compatible(mu, nu)?;
    // dual: <f, mu> + <g, nu> - eps (mass(pi) - 1)
    let linear: f64 = mu
        .weights()
        .iter()
        .zip(&pot.f)
        .map(|(w, f)| w * f)
        .sum::<f64>()
        + nu.weights()
            .iter()
            .zip(&pot.g)
            .map(|(w, g)| w * g)
            .sum::<f64>();
    let mass: f64 = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let x = mu.point(i);
            let mut s = 0.0;
            for j in 0..nu.len() {
                let rho = spec.cost(i, x, j, nu.point(j));
                s += nu.weight(j) * ((pot.f[i] + pot.g[j] - rho) / epsilon).exp();
            }
            mu.weight(i) * s
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let cost = linear - epsilon * (mass - 1.0);
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::Numeric {
            index: 0,
            what: "entropic transport cost is not finite",
        })
    }
}

/// Gradient of the reproduction-side potential `g(y)` at each atom, from
/// converged potentials.
///
/// Differentiating `g(y) = -eps ln sum_i mu_i exp((f_i - rho(x_i, y)) / eps)`
/// with `f` held fixed gives the posterior average of `d rho(x_i, y) / dy`
/// under the softmax over `i`.
pub fn eot_gradient_from_potentials(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    epsilon: f64,
    pot: &SinkhornPotentials,
) -> Result<ParticleGradient> {
    spec.require_differentiable()?;
    check_potentials(mu, nu, epsilon, pot)?;
    let (m, d) = (mu.len(), nu.dim());
    let rows: Vec<Vec<f64>> = (0..nu.len())
        .into_par_iter()
        .map(|j| {
            let y = nu.point(j);
            let logits: Vec<f64> = (0..m)
                .map(|i| mu.weight(i).ln() + (pot.f[i] - spec.cost(i, mu.point(i), j, y)) / epsilon)
                .collect();
            let lse = logsumexp(&logits);
            let mut grad = vec![0.0; d];
            for (i, l) in logits.iter().enumerate() {
                spec.add_grad_y(mu.point(i), y, (l - lse).exp(), &mut grad);
            }
            grad
        })
        .collect();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            index: k / d,
            what: "potential gradient is not finite",
        });
    }
    Ok(ParticleGradient::new(data, d))
}

/// Solves Sinkhorn to `tol` and returns the gradient of `g` at each atom.
///
/// For a single source point and a single atom this is `d rho(x, y) / dy`,
/// i.e. `epsilon` times the rate-functional gradient at `lambda = 1 / epsilon`.
pub fn wgd_gradient_eot(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ParticleGradient> {
    spec.require_differentiable()?;
    let pot = sinkhorn_solve(mu, nu, spec, epsilon, tol, max_iters)?;
    if !pot.converged {
        return Err(Error::NotConverged {
            iterations: pot.iterations,
            violation: pot.marginal_violation,
        });
    }
    eot_gradient_from_potentials(mu, nu, spec, epsilon, &pot)
}

/// Dense coupling matrix implied by the potentials (row-major `m x n`).
pub fn coupling(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    pot: &SinkhornPotentials,
) -> Result<CostMatrix> {
    spec.check_compatible(mu, nu)?;
    let mut data = Vec::with_capacity(mu.len() * nu.len());
    for i in 0..mu.len() {
        for j in 0..nu.len() {
            let rho = spec.cost(i, mu.point(i), j, nu.point(j));
            data.push(
                mu.weight(i) * nu.weight(j) * ((pot.f[i] + pot.g[j] - rho) / pot.epsilon).exp(),
            );
        }
    }
    CostMatrix::new(mu.len(), nu.len(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratefn::rate_functional_eval;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(points: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(points.to_vec(), 1).unwrap()
    }

    fn half() -> DistortionSpec {
        DistortionSpec::half_squared()
    }

    #[test]
    fn identical_diracs() {
        let a = line(&[0.0]);
        let pot = sinkhorn_solve(&a, &a, &half(), 0.3, 1e-12, 100).unwrap();
        assert!(pot.converged);
        assert_eq!(pot.iterations, 1);
        let pi = coupling(&a, &a, &half(), &pot).unwrap();
        assert_abs_diff_eq!(pi.get(0, 0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            eot_cost(&a, &a, &half(), 0.3, &pot).unwrap(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn distinct_diracs_cost_half() {
        let (a, b) = (line(&[0.0]), line(&[1.0]));
        for eps in [0.01, 1.0, 50.0] {
            let pot = sinkhorn_solve(&a, &b, &half(), eps, 1e-12, 100).unwrap();
            assert!(pot.converged);
            assert_abs_diff_eq!(
                eot_cost(&a, &b, &half(), eps, &pot).unwrap(),
                0.5,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn two_by_two_marginals() {
        let (a, b) = (line(&[0.0, 1.0]), line(&[0.2, 1.5]));
        let pot = sinkhorn_solve(&a, &b, &half(), 1.0, 1e-12, 1000).unwrap();
        assert!(pot.converged);
        let pi = coupling(&a, &b, &half(), &pot).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(pi.row(i).iter().sum::<f64>(), 0.5, epsilon = 1e-10);
            assert_abs_diff_eq!(pi.get(0, i) + pi.get(1, i), 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn primal_cost_matches_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (a, b) = (
            DiscreteMeasure::uniform(xs, 2).unwrap(),
            DiscreteMeasure::uniform(ys, 2).unwrap(),
        );
        let eps = 0.4;
        let pot = sinkhorn_solve(&a, &b, &half(), eps, 1e-13, 10_000).unwrap();
        let pi = coupling(&a, &b, &half(), &pot).unwrap();
        let mut primal = 0.0;
        for i in 0..a.len() {
            for j in 0..b.len() {
                let p = pi.get(i, j);
                let rho = half().cost(i, a.point(i), j, b.point(j));
                primal += p * rho + eps * p * (p / (a.weight(i) * b.weight(j))).ln();
            }
        }
        assert_abs_diff_eq!(
            primal,
            eot_cost(&a, &b, &half(), eps, &pot).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn violation_trace_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ys: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pot = sinkhorn_solve(&line(&xs), &line(&ys), &half(), 0.5, 1e-12, 5000).unwrap();
            assert!(pot.converged);
            for w in pot.violation_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn eps_scaling_gives_same_answer() {
        let xs: Vec<f64> = (0..30).map(|k| (k as f64 * 0.7).sin() * 3.0).collect();
        let ys: Vec<f64> = (0..6).map(|k| k as f64 - 2.5).collect();
        let (a, b) = (line(&xs), line(&ys));
        let eps = 0.02;
        let plain = sinkhorn_solve(&a, &b, &half(), eps, 1e-10, 100_000).unwrap();
        let opts = SinkhornOptions {
            tol: 1e-10,
            max_iters: 100_000,
            eps_scaling_stages: Some(6),
        };
        let scaled = sinkhorn_solve_with(&a, &b, &half(), eps, &opts, None).unwrap();
        assert!(plain.converged && scaled.converged);
        let c1 = eot_cost(&a, &b, &half(), eps, &plain).unwrap();
        let c2 = eot_cost(&a, &b, &half(), eps, &scaled).unwrap();
        assert_abs_diff_eq!(c1, c2, epsilon = 1e-9);
    }

    #[test]
    fn stale_potentials_refused() {
        let (a, b) = (line(&[0.0, 3.0, 5.0]), line(&[1.0, 4.0]));
        let pot = sinkhorn_solve(&a, &b, &half(), 0.05, 1e-14, 1).unwrap();
        assert!(!pot.converged);
        assert_eq!(
            eot_cost(&a, &b, &half(), 0.05, &pot),
            Err(Error::StalePotentials)
        );
        let good = sinkhorn_solve(&a, &b, &half(), 0.5, 1e-12, 1000).unwrap();
        assert_eq!(
            eot_cost(&a, &b, &half(), 0.25, &good),
            Err(Error::StalePotentials)
        );
        assert!(matches!(
            wgd_gradient_eot(&a, &b, &half(), 0.05, 1e-14, 1),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn single_atom_gradient() {
        let mu = DiscreteMeasure::dirac(&[1.0, -2.0]).unwrap();
        let nu = DiscreteMeasure::dirac(&[0.5, 0.0]).unwrap();
        let g = wgd_gradient_eot(&mu, &nu, &half(), 0.7, 1e-12, 100).unwrap();
        assert_abs_diff_eq!(g.row(0)[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.row(0)[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn self_projection_with_separated_atoms_is_stationary() {
        // cross terms exp(-rho / eps) <= exp(-50): the coupling is the identity
        let a = line(&[-5.0, 0.0, 5.0]);
        let g = wgd_gradient_eot(&a, &a, &half(), 0.25, 1e-12, 100).unwrap();
        for row in g.rows() {
            assert!(row[0].abs() <= 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (mu, nu) = (line(&xs), line(&ys));
        let eps = 0.8;
        let g = wgd_gradient_eot(&mu, &nu, &half(), eps, 1e-14, 10_000).unwrap();
        let cost_at = |pts: Vec<f64>| {
            let nu = nu.with_points(pts).unwrap();
            let pot = sinkhorn_solve(&mu, &nu, &half(), eps, 1e-14, 10_000).unwrap();
            eot_cost(&mu, &nu, &half(), eps, &pot).unwrap()
        };
        let h = 1e-5;
        for j in 0..3 {
            let mut p = ys.clone();
            let mut q = ys.clone();
            p[j] += h;
            q[j] -= h;
            let fd = (cost_at(p) - cost_at(q)) / (2.0 * h) / nu.weight(j);
            assert_abs_diff_eq!(
                fd,
                g.row(j)[0],
                epsilon = 1e-4 * g.row(j)[0].abs().max(1e-3)
            );
        }
    }

    #[test]
    fn rate_functional_lower_bounds_eot() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (mu, nu) = (line(&xs), line(&ys));
            let eps = rng.random_range(0.1..2.0);
            let pot = sinkhorn_solve(&mu, &nu, &half(), eps, 1e-12, 10_000).unwrap();
            let eot = eot_cost(&mu, &nu, &half(), eps, &pot).unwrap();
            let (ba, _) = rate_functional_eval(&mu, &nu, &half(), 1.0 / eps).unwrap();
            assert!(
                eps * ba <= eot + 1e-9,
                "eps*L_BA = {} > L_EOT = {}",
                eps * ba,
                eot
            );
        }
    }

    #[test]
    fn zero_weight_atom_is_tolerated() {
        let mu = line(&[0.0, 1.0, 2.0]);
        let nu = DiscreteMeasure::new(vec![0.5, 1.5], vec![1.0, 0.0], 1).unwrap();
        let pot = sinkhorn_solve(&mu, &nu, &half(), 0.5, 1e-12, 100).unwrap();
        assert!(pot.converged);
        assert!(pot.g.iter().all(|g| g.is_finite()));
        // all mass goes to the single positive atom
        let expected = (0.5 * 0.25 + 0.5 * 0.25 + 0.5 * 2.25) / 3.0;
        assert_abs_diff_eq!(
            eot_cost(&mu, &nu, &half(), 0.5, &pot).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }
}
