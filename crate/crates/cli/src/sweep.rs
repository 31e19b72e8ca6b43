//! Lambda sweeps: one independent solve per multiplier, run in parallel.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use rdwgd_core::ba::ba_solve;
use rdwgd_core::measures::RngSeed;
use rdwgd_core::wgd::{hybrid_run_from, wgd_run_from};
use rdwgd_core::{
    initial_measure, rd_point_from_nu, DiscreteMeasure, DistortionSpec, LossKind, RDPoint, StepSchedule,
    WgdConfig,
};

use crate::config::{Method, SweepConfig};
use crate::output::{render_trace, write_rd_csv, write_with, OutputError};

/// Rates within this many nats of `ln(n)` are flagged.
pub const CEILING_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaResult {
    pub lambda: f64,
    pub point: RDPoint,
    pub final_nu: DiscreteMeasure,
    pub loss_trace: Vec<(usize, f64)>,
    /// Empty for BA.
    pub grad_norm_trace: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaFailure {
    pub lambda: f64,
    pub error: rdwgd_core::Error,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    /// Descending in lambda.
    pub results: Vec<LambdaResult>,
    pub failures: Vec<LambdaFailure>,
}

impl SweepReport {
    pub fn points(&self) -> Vec<RDPoint> {
        self.results.iter().map(|r| r.point.clone()).collect()
    }

    /// Lambdas whose rate is within [`CEILING_MARGIN`] of `ln(n)`.
    pub fn ceiling_warnings(&self) -> Vec<&RDPoint> {
        self.results
            .iter()
            .map(|r| &r.point)
            .filter(|p| p.near_ceiling(CEILING_MARGIN))
            .collect()
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for p in self.ceiling_warnings() {
            lines.push(format!(
                "ceiling warning: lambda={} rate={:.6} nats is within {CEILING_MARGIN} of ln({})={:.6}; increase n",
                p.lambda,
                p.rate,
                p.n_atoms,
                p.rate_ceiling()
            ));
        }
        for f in &self.failures {
            lines.push(format!("failed: lambda={}: {}", f.lambda, f.error));
        }
        lines
    }
}

/// Seed for one lambda; depends on the lambda value, not its grid position.
pub fn lambda_seed(seed: u64, lambda: f64) -> u64 {
    RngSeed::new(seed).fork(lambda.to_bits()).stream
}

/// Runs the configured method at every lambda. A failing lambda is recorded
/// and the others still run.
pub fn run_sweep(config: &SweepConfig, data: &DiscreteMeasure) -> SweepReport {
    let spec = match DistortionSpec::from_kind(config.distortion) {
        Ok(s) => s,
        Err(error) => {
            return SweepReport {
                results: Vec::new(),
                failures: config.sorted_lambdas().into_iter().map(|lambda| LambdaFailure { lambda, error: error.clone() }).collect(),
            }
        }
    };
    let lambdas = config.sorted_lambdas();
    let outcomes: Vec<(f64, rdwgd_core::Result<LambdaResult>)> = if config.warm_start {
        let mut prev: Option<DiscreteMeasure> = None;
        lambdas
            .iter()
            .map(|&lambda| {
                let out = solve_lambda(config, data, &spec, lambda, prev.clone());
                if let Ok(r) = &out {
                    prev = Some(r.final_nu.clone());
                }
                (lambda, out)
            })
            .collect()
    } else {
        lambdas
            .par_iter()
            .map(|&lambda| (lambda, solve_lambda(config, data, &spec, lambda, None)))
            .collect()
    };
    let mut report = SweepReport::default();
    for (lambda, out) in outcomes {
        match out {
            Ok(r) => report.results.push(r),
            Err(error) => report.failures.push(LambdaFailure { lambda, error }),
        }
    }
    report
}

/// Solver settings shared by every method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodParams {
    pub iters: usize,
    pub tol: f64,
    pub schedule: StepSchedule,
    pub batch_size: Option<usize>,
    pub eval_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub final_nu: DiscreteMeasure,
    /// Update steps taken.
    pub iterations: usize,
    /// Loss of the reproduction measure after each iteration, starting at 0.
    pub loss_trace: Vec<(usize, f64)>,
    pub grad_norm_trace: Vec<(usize, f64)>,
}

/// Runs one method from `nu0` at a fixed lambda.
pub fn run_method(
    method: Method,
    data: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
    params: &MethodParams,
    nu0: DiscreteMeasure,
) -> rdwgd_core::Result<MethodRun> {
    if method == Method::Ba {
        // one BA iteration is one marginal update, as one WGD iteration is one step
        let run = ba_solve(data, &nu0, spec, lambda, params.iters + 1, params.tol)?;
        return Ok(MethodRun {
            iterations: run.iterations() - 1,
            loss_trace: run.trace.iter().copied().enumerate().collect(),
            final_nu: run.nu,
            grad_norm_trace: Vec::new(),
        });
    }
    let wgd = WgdConfig {
        loss: if method == Method::WgdEot { LossKind::Eot } else { LossKind::Ba },
        batch_size: params.batch_size,
        seed: params.seed,
        eval_size: params.eval_size,
        ..WgdConfig::new(lambda, nu0.len(), params.iters, params.schedule)
    };
    let run = if method == Method::Hybrid {
        hybrid_run_from(data, spec, &wgd, nu0)?
    } else {
        wgd_run_from(data, spec, &wgd, nu0)?
    };
    Ok(MethodRun {
        final_nu: run.final_nu,
        iterations: params.iters,
        loss_trace: run.loss_trace,
        grad_norm_trace: run.grad_norm_trace,
    })
}

fn solve_lambda(
    config: &SweepConfig,
    data: &DiscreteMeasure,
    spec: &DistortionSpec,
    lambda: f64,
    warm: Option<DiscreteMeasure>,
) -> rdwgd_core::Result<LambdaResult> {
    let start = Instant::now();
    let seed = lambda_seed(config.seed, lambda);
    let nu0 = match warm {
        Some(nu) => nu,
        None => initial_measure(data, config.n, seed)?,
    };
    let params = MethodParams {
        iters: config.iters,
        tol: config.tol,
        schedule: config.schedule,
        batch_size: config.batch_size,
        eval_size: config.eval_size,
        seed,
    };
    let run = run_method(config.method, data, spec, lambda, &params, nu0)?;
    let mut point = rd_point_from_nu(data, &run.final_nu, spec, lambda)?;
    point.meta.solver = config.method.label().to_string();
    point.meta.iterations = run.iterations;
    point.meta.wall_ms = if config.timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    Ok(LambdaResult {
        lambda,
        point,
        final_nu: run.final_nu,
        loss_trace: run.loss_trace,
        grad_norm_trace: run.grad_norm_trace,
    })
}

/// Writes the R-D CSV (if configured) and one trace file per lambda (if a
/// trace directory is configured).
pub fn write_sweep_outputs(report: &SweepReport, config: &SweepConfig) -> Result<(), OutputError> {
    if let Some(out) = &config.out {
        if !report.results.is_empty() {
            write_rd_csv(&report.points(), out, config.units)?;
        }
    }
    if let Some(dir) = &config.trace_dir {
        std::fs::create_dir_all(dir).map_err(|source| OutputError::Io {
            path: dir.clone(),
            source,
        })?;
        for r in &report.results {
            let path = trace_path(dir, config.method, r.lambda);
            write_with(&path, |w| render_trace(w, &r.loss_trace, &r.grad_norm_trace, config.units))?;
        }
    }
    Ok(())
}

pub fn trace_path(dir: &Path, method: Method, lambda: f64) -> std::path::PathBuf {
    dir.join(format!("trace_{}_lambda_{lambda}.csv", method.label()))
}
