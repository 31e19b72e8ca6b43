//! Wasserstein gradient descent over particle locations, and the hybrid
//! variant that interleaves Blahut-Arimoto reweighting steps.
//!
//! A step pushes `nu` forward under `id - gamma * Psi`: every atom moves
//! against its gradient and keeps its weight.

use serde::{Deserialize, Serialize};

use crate::ba::{ba_marginal_update, kernel_update_with_loss};
use crate::distortion::DistortionSpec;
use crate::eot::{eot_gradient_from_potentials, sinkhorn_solve_with, SinkhornOptions};
use crate::error::{require_positive, Error, Result};
use crate::measures::{
    initial_particles, minibatch_with, DiscreteMeasure, RngSeed, WeightedSampler,
};
use crate::ratefn::{gibbs_pass, rate_functional_eval, ParticleGradient, Request};

const STREAM_INIT: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_BATCH: u64 = 3;

/// Step sizes `gamma_t` for `t = 0, 1, ...`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        gamma0: f64,
    },
    /// `gamma_t = gamma0 / (1 + decay * t)`
    InverseDecay {
        gamma0: f64,
        decay: f64,
    },
    /// Adam on the particle coordinates with base rate `gamma0`.
    AdaptiveMoment {
        gamma0: f64,
        beta1: f64,
        beta2: f64,
        offset: f64,
    },
}

impl StepSchedule {
    pub fn adam(gamma0: f64) -> Self {
        StepSchedule::AdaptiveMoment {
            gamma0,
            beta1: 0.9,
            beta2: 0.999,
            offset: 1e-8,
        }
    }

    pub fn gamma0(&self) -> f64 {
        match *self {
            StepSchedule::Constant { gamma0 }
            | StepSchedule::InverseDecay { gamma0, .. }
            | StepSchedule::AdaptiveMoment { gamma0, .. } => gamma0,
        }
    }

    /// Base step size at iteration `t`.
    pub fn gamma(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::InverseDecay { gamma0, decay } => gamma0 / (1.0 + decay * t as f64),
            _ => self.gamma0(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("gamma0", self.gamma0())?;
        match *self {
            StepSchedule::InverseDecay { decay, .. } if !(decay >= 0.0 && decay.is_finite()) => {
                Err(Error::InvalidParameter {
                    name: "decay",
                    reason: format!("must be a nonnegative finite number, got {decay}"),
                })
            }
            StepSchedule::AdaptiveMoment {
                beta1,
                beta2,
                offset,
                ..
            } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(b > 0.0 && b < 1.0) {
                        return Err(Error::InvalidParameter {
                            name,
                            reason: format!("must lie in (0, 1), got {b}"),
                        });
                    }
                }
                require_positive("offset", offset)
            }
            _ => Ok(()),
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::adam(0.01)
    }
}

/// Turns raw gradients into displacements, holding the moment estimates of
/// the adaptive schedule.
#[derive(Clone, Debug)]
struct Stepper {
    schedule: StepSchedule,
    first: Vec<f64>,
    second: Vec<f64>,
    t: usize,
}

impl Stepper {
    fn new(schedule: StepSchedule) -> Self {
        Self {
            schedule,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    /// Returns `(direction, gamma)` such that the update is `y - gamma * direction`.
    fn direction(&mut self, grad: ParticleGradient) -> (ParticleGradient, f64) {
        let t = self.t;
        self.t += 1;
        match self.schedule {
            StepSchedule::AdaptiveMoment {
                gamma0,
                beta1,
                beta2,
                offset,
            } => {
                if self.first.len() != grad.as_slice().len() {
                    self.first = vec![0.0; grad.as_slice().len()];
                    self.second = vec![0.0; grad.as_slice().len()];
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                let dir = grad
                    .as_slice()
                    .iter()
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        (*m / c1) / ((*v / c2).sqrt() + offset)
                    })
                    .collect();
                (ParticleGradient::new(dir, grad.dim()), gamma0)
            }
            _ => (grad, self.schedule.gamma(t)),
        }
    }
}

/// Moves atom `j` to `y_j - gamma * gradient_j`. Weights are unchanged and
/// coincident atoms are kept as separate entries.
pub fn wgd_step(
    nu: &DiscreteMeasure,
    gradient: &ParticleGradient,
    gamma: f64,
) -> Result<DiscreteMeasure> {
    require_positive("gamma", gamma)?;
    if gradient.len() != nu.len() || gradient.dim() != nu.dim() {
        return Err(Error::ShapeMismatch {
            expected_rows: nu.len(),
            expected_cols: nu.dim(),
            rows: gradient.len(),
            cols: gradient.dim(),
        });
    }
    if let Some(k) = gradient.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            index: k / nu.dim(),
            what: "non-finite gradient entry",
        });
    }
    let points: Vec<f64> = nu
        .points()
        .iter()
        .zip(gradient.as_slice())
        .map(|(y, g)| y - gamma * g)
        .collect();
    if let Some(k) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric {
            index: k / nu.dim(),
            what: "particle left the finite range",
        });
    }
    nu.with_points(points)
}

/// `sum_j w_j |grad psi(y_j)|^2` for the rate functional.
pub fn grad_norm_sq(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
) -> Result<f64> {
    spec.require_differentiable()?;
    let grad = gibbs_pass(mu, nu, spec, lambda, Request::gradient())?
        .gradient
        .expect("requested");
    Ok(grad.weighted_norm_sq(nu.weights()))
}

/// Largest `gamma = gamma_max / 2^k` (k < 60) for which one plain step from
/// `nu` satisfies the Armijo condition
/// `L(nu') <= L(nu) - gamma / 2 * sum_j w_j |grad psi(y_j)|^2`.
pub fn probe_step_size(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
    gamma_max: f64,
) -> Result<f64> {
    require_positive("gamma_max", gamma_max)?;
    spec.require_differentiable()?;
    let pass = gibbs_pass(mu, nu, spec, lambda, Request::gradient())?;
    let grad = pass.gradient.expect("requested");
    let slope = grad.weighted_norm_sq(nu.weights());
    let mut gamma = gamma_max;
    for _ in 0..60 {
        let moved = wgd_step(nu, &grad, gamma)?;
        let (loss, _) = rate_functional_eval(mu, &moved, spec, lambda)?;
        if loss <= pass.loss - 0.5 * gamma * slope {
            return Ok(gamma);
        }
        gamma *= 0.5;
    }
    Ok(gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// The rate functional at `lambda`.
    Ba,
    /// Entropic OT at `epsilon = 1 / lambda`, scaled by `lambda` so that step
    /// sizes are comparable with [`LossKind::Ba`].
    Eot,
}

/// Hyperparameters of a descent run. Everything that influences the result
/// is in here, so the struct doubles as the run's config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WgdConfig {
    pub loss: LossKind,
    pub lambda: f64,
    pub n: usize,
    pub schedule: StepSchedule,
    /// Minibatch size; `None` is full batch.
    pub batch_size: Option<usize>,
    pub iters: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Size of the fixed evaluation batch used for `loss_trace`.
    pub eval_size: usize,
    /// Gradient steps per BA reweighting step (hybrid only).
    pub ba_every: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iters: usize,
}

impl WgdConfig {
    pub fn new(lambda: f64, n: usize, iters: usize, schedule: StepSchedule) -> Self {
        Self {
            loss: LossKind::Ba,
            lambda,
            n,
            schedule,
            batch_size: None,
            iters,
            seed: 0,
            eval_every: 1,
            eval_size: 10_000,
            ba_every: 1,
            sinkhorn_tol: crate::eot::DEFAULT_TOL,
            sinkhorn_max_iters: crate::eot::DEFAULT_MAX_ITERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("lambda", self.lambda)?;
        self.schedule.validate()?;
        let counts = [
            ("n", self.n),
            ("iters", self.iters),
            ("eval_every", self.eval_every),
            ("eval_size", self.eval_size),
            ("ba_every", self.ba_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidBatch);
        }
        Ok(())
    }
}

/// Result of [`wgd_run`] or [`hybrid_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct WgdRun {
    pub final_nu: DiscreteMeasure,
    /// `(iteration, L_BA on the evaluation batch)`; the last entry is the final measure.
    pub loss_trace: Vec<(usize, f64)>,
    /// `(iteration, sum_j w_j |grad|^2)` on the batch used for that step; the
    /// last entry is the final measure.
    pub grad_norm_trace: Vec<(usize, f64)>,
    /// `(iteration, loss on that iteration's batch)` before the step.
    pub train_loss_trace: Vec<(usize, f64)>,
    /// `(iteration, loss before, loss after)` for each BA reweighting step.
    pub ba_trace: Vec<(usize, f64, f64)>,
    pub config: WgdConfig,
}

impl WgdRun {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().expect("traces are nonempty").1
    }

    /// First iteration at which the evaluation loss is at most `target`.
    pub fn first_iteration_below(&self, target: f64) -> Option<usize> {
        self.loss_trace
            .iter()
            .find(|(_, l)| *l <= target)
            .map(|(t, _)| *t)
    }
}

/// The `n`-atom starting measure that [`wgd_run`] and [`hybrid_run`] use
/// for `seed`.
pub fn initial_measure(mu: &DiscreteMeasure, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    initial_particles(mu, n, RngSeed::new(seed).fork(STREAM_INIT))
}

/// Wasserstein gradient descent on the chosen loss, starting from `n` atoms of `mu`.
pub fn wgd_run(mu: &DiscreteMeasure, spec: &DistortionSpec, config: &WgdConfig) -> Result<WgdRun> {
    config.validate()?;
    let nu0 = initial_measure(mu, config.n, config.seed)?;
    descend(mu, spec, config, nu0, false)
}

/// Like [`wgd_run`] but starting from a given measure (warm starts).
pub fn wgd_run_from(
    mu: &DiscreteMeasure,
    spec: &DistortionSpec,
    config: &WgdConfig,
    nu0: DiscreteMeasure,
) -> Result<WgdRun> {
    config.validate()?;
    descend(mu, spec, config, nu0, false)
}

/// WGD with one BA reweighting step after every `ba_every` gradient steps.
/// Full batch only.
pub fn hybrid_run(
    mu: &DiscreteMeasure,
    spec: &DistortionSpec,
    config: &WgdConfig,
) -> Result<WgdRun> {
    config.validate()?;
    let nu0 = initial_measure(mu, config.n, config.seed)?;
    hybrid_run_from(mu, spec, config, nu0)
}

pub fn hybrid_run_from(
    mu: &DiscreteMeasure,
    spec: &DistortionSpec,
    config: &WgdConfig,
    nu0: DiscreteMeasure,
) -> Result<WgdRun> {
    config.validate()?;
    if config.batch_size.is_some() {
        return Err(Error::Unsupported(
            "the hybrid algorithm runs on the full batch only",
        ));
    }
    descend(mu, spec, config, nu0, true)
}

fn descend(
    mu: &DiscreteMeasure,
    spec: &DistortionSpec,
    config: &WgdConfig,
    nu0: DiscreteMeasure,
    hybrid: bool,
) -> Result<WgdRun> {
    spec.require_differentiable()?;
    spec.check_compatible(mu, &nu0)?;
    let lambda = config.lambda;
    let seed = RngSeed::new(config.seed);
    let sampler = WeightedSampler::new(mu);
    let eval_is_mu = mu.len() <= config.eval_size;
    let eval = if eval_is_mu {
        mu.clone()
    } else {
        minibatch_with(
            mu,
            &sampler,
            config.eval_size,
            &mut seed.fork(STREAM_EVAL).rng(),
        )
    };
    let mut batch_rng = seed.fork(STREAM_BATCH).rng();
    let minibatch = config.batch_size.filter(|&m| m < mu.len());

    let mut oracle = GradientOracle::new(config);
    let mut stepper = Stepper::new(config.schedule);
    let mut nu = nu0;
    let mut loss_trace = Vec::new();
    let mut grad_norm_trace = Vec::with_capacity(config.iters + 1);
    let mut train_loss_trace = Vec::with_capacity(config.iters);
    let mut ba_trace = Vec::new();
    let mut pending_ba: Option<(usize, f64)> = None;

    for t in 0..config.iters {
        let drawn;
        let batch = match minibatch {
            Some(m) => {
                drawn = minibatch_with(mu, &sampler, m, &mut batch_rng);
                &drawn
            }
            None => mu,
        };
        let (loss, grad) = oracle.eval(batch, &nu, spec)?;
        if let Some((at, before)) = pending_ba.take() {
            ba_trace.push((at, before, loss));
        }
        train_loss_trace.push((t, loss));
        grad_norm_trace.push((t, grad.weighted_norm_sq(nu.weights())));
        if t % config.eval_every == 0 {
            let known = (eval_is_mu && minibatch.is_none() && !loss.is_nan()).then_some(loss);
            loss_trace.push((t, eval_loss(&eval, &nu, spec, lambda, known)?));
        }
        let (dir, gamma) = stepper.direction(grad);
        nu = wgd_step(&nu, &dir, gamma)?;
        if hybrid && (t + 1) % config.ba_every == 0 {
            let (kernel, before) = kernel_update_with_loss(mu, &nu, spec, lambda)?;
            nu = ba_marginal_update(mu, &nu, &kernel)?;
            pending_ba = Some((t, before));
        }
    }

    let (loss, grad) = oracle.eval(mu, &nu, spec)?;
    if let Some((at, before)) = pending_ba {
        ba_trace.push((at, before, loss));
    }
    grad_norm_trace.push((config.iters, grad.weighted_norm_sq(nu.weights())));
    let known = (eval_is_mu && !loss.is_nan()).then_some(loss);
    loss_trace.push((config.iters, eval_loss(&eval, &nu, spec, lambda, known)?));

    Ok(WgdRun {
        final_nu: nu,
        loss_trace,
        grad_norm_trace,
        train_loss_trace,
        ba_trace,
        config: config.clone(),
    })
}

/// `L_BA` on the evaluation batch. `known` is a loss already computed on the
/// same batch and measure.
fn eval_loss(
    eval: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
    known: Option<f64>,
) -> Result<f64> {
    match known {
        Some(loss) => Ok(loss),
        None => Ok(rate_functional_eval(eval, nu, spec, lambda)?.0),
    }
}

/// Loss and gradient for one iteration. For the entropic loss it keeps the
/// last `g` potential as a warm start.
struct GradientOracle {
    loss: LossKind,
    lambda: f64,
    sinkhorn: SinkhornOptions,
    warm_g: Option<Vec<f64>>,
}

impl GradientOracle {
    fn new(config: &WgdConfig) -> Self {
        Self {
            loss: config.loss,
            lambda: config.lambda,
            sinkhorn: SinkhornOptions {
                tol: config.sinkhorn_tol,
                max_iters: config.sinkhorn_max_iters,
                eps_scaling_stages: None,
            },
            warm_g: None,
        }
    }

    /// Returns `(loss, gradient)`. For the entropic loss the returned loss is
    /// NaN (not the rate functional) and the gradient is `lambda * grad g`.
    fn eval(
        &mut self,
        batch: &DiscreteMeasure,
        nu: &DiscreteMeasure,
        spec: &DistortionSpec,
    ) -> Result<(f64, ParticleGradient)> {
        match self.loss {
            LossKind::Ba => {
                let pass = gibbs_pass(batch, nu, spec, self.lambda, Request::gradient())?;
                Ok((pass.loss, pass.gradient.expect("requested")))
            }
            LossKind::Eot => {
                let eps = 1.0 / self.lambda;
                let pot = sinkhorn_solve_with(
                    batch,
                    nu,
                    spec,
                    eps,
                    &self.sinkhorn,
                    self.warm_g.as_deref(),
                )?;
                if !pot.converged {
                    return Err(Error::NotConverged {
                        iterations: pot.iterations,
                        violation: pot.marginal_violation,
                    });
                }
                let g = eot_gradient_from_potentials(batch, nu, spec, eps, &pot)?;
                self.warm_g = Some(pot.g);
                let scaled = g.as_slice().iter().map(|v| v * self.lambda).collect();
                Ok((f64::NAN, ParticleGradient::new(scaled, g.dim())))
            }
        }
    }
}
