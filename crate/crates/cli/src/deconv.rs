//! Deconvolution benchmark: a sphere of radius one blurred by Gaussian noise,
//! for which the optimal loss is known, so solver gaps can be measured.

use std::io::Write;

use rdwgd_core::measures::RngSeed;
use rdwgd_core::sources::{opt_loss_mc, rd_segment, sample_convolved, McEstimate};
use rdwgd_core::{initial_measure, ConvolvedSourceSpec, DiscreteMeasure, DistortionSpec, StepSchedule};
use serde::Serialize;

use crate::config::Method;
use crate::output::real;
use crate::sweep::{run_method, MethodParams};

const STREAM_DATA: u64 = 101;
const STREAM_OPT: u64 = 102;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeconvConfig {
    pub dim: usize,
    pub sigma2: f64,
    pub lambda: f64,
    pub n: usize,
    /// Number of source samples.
    pub m: usize,
    pub iters: usize,
    pub methods: Vec<Method>,
    pub schedule: StepSchedule,
    pub seed: u64,
    /// Gap below which a method counts as converged.
    pub band: f64,
    pub m_eval: usize,
    pub n_eval: usize,
    /// Skip the Monte Carlo OPT estimate and use the quadrature value only.
    pub skip_mc: bool,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            sigma2: 0.1,
            lambda: 10.0,
            n: 20,
            m: 100_000,
            iters: 200,
            methods: vec![Method::Ba, Method::Wgd, Method::Hybrid],
            schedule: StepSchedule::InverseDecay {
                gamma0: 0.1,
                decay: 0.01,
            },
            seed: 0,
            band: 2e-2,
            m_eval: 10_000,
            n_eval: 100_000,
            skip_mc: false,
        }
    }
}

impl DeconvConfig {
    pub fn source(&self) -> rdwgd_core::Result<ConvolvedSourceSpec> {
        ConvolvedSourceSpec::sphere(1.0, self.sigma2, self.dim)
    }

    /// The `m` source samples used by every method.
    pub fn dataset(&self) -> rdwgd_core::Result<DiscreteMeasure> {
        sample_convolved(&self.source()?, self.m, RngSeed::new(self.seed).fork(STREAM_DATA))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub final_loss: f64,
    /// `final_loss - reference`.
    pub gap: f64,
    pub iterations: usize,
    /// First iteration whose loss is within `band` of the reference.
    pub first_in_band: Option<usize>,
    pub trace: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeconvReport {
    /// `OPT` from the entropy of the source (deterministic quadrature for
    /// d <= 2 and for spheres).
    pub reference: f64,
    /// Monte Carlo `OPT` from samples of the optimal reproduction.
    pub opt_mc: Option<(f64, f64)>,
    /// Initial loss shared by all methods.
    pub initial_loss: f64,
    pub outcomes: Vec<MethodOutcome>,
}

impl DeconvReport {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("reference OPT = {:.6} nats", self.reference)];
        if let Some((est, se)) = self.opt_mc {
            lines.push(format!("Monte Carlo OPT = {est:.6} +- {se:.6} nats"));
        }
        lines.push(format!("initial loss = {:.6}", self.initial_loss));
        for o in &self.outcomes {
            let band = o.first_in_band.map_or("never".to_string(), |t| t.to_string());
            lines.push(format!(
                "{:>7}: final {:.6} gap {:+.6} iterations {} in band at {band}",
                o.method.label(),
                o.final_loss,
                o.gap,
                o.iterations
            ));
        }
        lines
    }

    /// `iteration,method,loss,gap` rows for every method.
    pub fn write_traces<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "iteration,method,loss,gap")?;
        for o in &self.outcomes {
            for &(t, l) in &o.trace {
                writeln!(w, "{t},{},{},{}", o.method.label(), real(l), real(l - self.reference))?;
            }
        }
        Ok(())
    }
}

/// Runs each configured method from the same initial atoms.
pub fn run_deconv_benchmark(config: &DeconvConfig) -> rdwgd_core::Result<DeconvReport> {
    let source = config.source()?;
    let data = config.dataset()?;
    run_on_data(config, &source, &data)
}

/// As [`run_deconv_benchmark`] but with caller-supplied samples.
pub fn run_on_data(
    config: &DeconvConfig,
    source: &ConvolvedSourceSpec,
    data: &DiscreteMeasure,
) -> rdwgd_core::Result<DeconvReport> {
    let reference = rd_segment(source, config.lambda)?.loss();
    let opt_mc = if config.skip_mc {
        None
    } else {
        let McEstimate { estimate, stderr } = opt_loss_mc(
            source,
            config.lambda,
            config.m_eval,
            config.n_eval,
            RngSeed::new(config.seed).fork(STREAM_OPT),
        )?;
        Some((estimate, stderr))
    };
    let spec = DistortionSpec::half_squared();
    let nu0 = initial_measure(data, config.n, config.seed)?;
    let params = MethodParams {
        iters: config.iters,
        tol: 0.0,
        schedule: config.schedule,
        batch_size: None,
        eval_size: data.len(),
        seed: config.seed,
    };
    let mut outcomes = Vec::new();
    let mut initial_loss = f64::NAN;
    for &method in &config.methods {
        let run = run_method(method, data, &spec, config.lambda, &params, nu0.clone())?;
        initial_loss = run.loss_trace[0].1;
        let final_loss = run.loss_trace.last().expect("nonempty trace").1;
        let first_in_band = run
            .loss_trace
            .iter()
            .find(|(_, l)| l - reference <= config.band)
            .map(|&(t, _)| t);
        outcomes.push(MethodOutcome {
            method,
            final_loss,
            gap: final_loss - reference,
            iterations: run.iterations,
            first_in_band,
            trace: run.loss_trace,
        });
    }
    Ok(DeconvReport {
        reference,
        opt_mc,
        initial_loss,
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingConfig {
    pub dims: Vec<usize>,
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sigma2: f64,
    /// Defaults to `1 / sigma2` when `None`.
    pub lambda: Option<f64>,
    pub m: usize,
    pub iters: usize,
    pub methods: Vec<Method>,
    pub schedule: StepSchedule,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 4],
            ns: vec![10, 20, 40],
            seeds: (0..5).collect(),
            sigma2: 0.1,
            lambda: None,
            m: 10_000,
            iters: 100,
            methods: vec![Method::Ba, Method::Wgd, Method::Hybrid],
            schedule: StepSchedule::InverseDecay {
                gamma0: 0.1,
                decay: 0.01,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub method: Method,
    pub final_loss: f64,
    pub gap: f64,
}

/// Final gaps for every (dimension, n, seed, method). The seed picks both the
/// data and the initial atoms; within one seed all methods share them.
pub fn run_scaling_study(config: &ScalingConfig) -> rdwgd_core::Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    let lambda = config.lambda.unwrap_or(1.0 / config.sigma2);
    for &dim in &config.dims {
        let source = ConvolvedSourceSpec::sphere(1.0, config.sigma2, dim)?;
        for &seed in &config.seeds {
            let data = sample_convolved(&source, config.m, RngSeed::new(seed).fork(STREAM_DATA))?;
            for &n in &config.ns {
                let bench = DeconvConfig {
                    dim,
                    sigma2: config.sigma2,
                    lambda,
                    n,
                    m: config.m,
                    iters: config.iters,
                    methods: config.methods.clone(),
                    schedule: config.schedule,
                    seed,
                    skip_mc: true,
                    ..DeconvConfig::default()
                };
                let report = run_on_data(&bench, &source, &data)?;
                rows.extend(report.outcomes.into_iter().map(|o| ScalingRow {
                    dim,
                    n,
                    seed,
                    method: o.method,
                    final_loss: o.final_loss,
                    gap: o.gap,
                }));
            }
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(w: &mut W, rows: &[ScalingRow]) -> std::io::Result<()> {
    writeln!(w, "dim,n,seed,method,final_loss,gap")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.dim,
            r.n,
            r.seed,
            r.method.label(),
            real(r.final_loss),
            real(r.gap)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DeconvConfig {
        DeconvConfig {
            m: 2000,
            iters: 30,
            n: 8,
            skip_mc: true,
            ..DeconvConfig::default()
        }
    }

    #[test]
    fn methods_share_the_initial_loss() {
        let report = run_deconv_benchmark(&small()).unwrap();
        let first: Vec<f64> = report.outcomes.iter().map(|o| o.trace[0].1).collect();
        assert!(first.iter().all(|&l| l == first[0]));
        assert_eq!(report.initial_loss, first[0]);
    }

    #[test]
    fn descent_improves_on_initialisation() {
        let report = run_deconv_benchmark(&small()).unwrap();
        for o in &report.outcomes {
            assert!(o.final_loss < report.initial_loss, "{:?}", o.method);
        }
        assert!(report.reference < report.initial_loss);
    }

    #[test]
    fn trace_csv_has_one_row_per_entry() {
        let report = run_deconv_benchmark(&small()).unwrap();
        let mut buf = Vec::new();
        report.write_traces(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: usize = report.outcomes.iter().map(|o| o.trace.len()).sum();
        assert_eq!(text.lines().count(), rows + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("0,ba,"));
    }

    #[test]
    fn scaling_study_covers_the_grid() {
        let config = ScalingConfig {
            dims: vec![2, 3],
            ns: vec![4, 6],
            seeds: vec![0, 1],
            m: 500,
            iters: 5,
            methods: vec![Method::Wgd, Method::Hybrid],
            ..ScalingConfig::default()
        };
        let rows = run_scaling_study(&config).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2 * 2);
        let mut buf = Vec::new();
        write_scaling_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 17);
    }

    #[test]
    fn below_segment_lambda_is_rejected() {
        let config = DeconvConfig {
            lambda: 5.0,
            ..small()
        };
        assert!(matches!(
            run_deconv_benchmark(&config),
            Err(rdwgd_core::Error::OutOfSegment { .. })
        ));
    }
}
