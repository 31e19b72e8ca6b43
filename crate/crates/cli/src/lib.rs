//! Command-line front end for `rdwgd-core`: lambda sweeps over a dataset, the
//! deconvolution benchmark, analytic oracle curves and dataset conversion.
//!
//! The binary is a thin wrapper around [`run`]; everything it does is also
//! callable from this library.

pub mod config;
pub mod dataset;
pub mod deconv;
pub mod oracle;
pub mod output;
pub mod sweep;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use config::{Method, SweepConfig, SweepOverrides, Units};
use dataset::DatasetFormat;
use deconv::{DeconvConfig, ScalingConfig};
use oracle::OracleSource;
use rdwgd_core::StepSchedule;

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug, Parser)]
#[command(name = "rdwgd", version, about = "Rate-distortion estimation by Wasserstein gradient descent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate R-D points over a lambda grid for a dataset.
    Sweep(SweepArgs),
    /// Compare solvers on the blurred-sphere source with known optimum.
    Deconv(DeconvArgs),
    /// Write analytic R-D points.
    Oracle(OracleArgs),
    /// Convert a dataset between csv and rdsamp1.
    Convert(ConvertArgs),
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the file extension (.csv/.txt are csv, anything else rdsamp1).
    #[arg(long, value_enum)]
    pub format: Option<DatasetFormat>,
    /// JSON file whose keys match the flag names; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: SweepOverrides,
}

#[derive(Debug, clap::Args)]
pub struct DeconvArgs {
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 100_000)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ba,wgd,hybrid")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 0.1)]
    pub gamma0: f64,
    #[arg(long, default_value_t = 0.01)]
    pub decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2e-2)]
    pub band: f64,
    /// Source draws for the Monte Carlo OPT estimate.
    #[arg(long, default_value_t = 10_000)]
    pub m_eval: usize,
    /// Draws from the optimal reproduction for the Monte Carlo OPT estimate.
    #[arg(long, default_value_t = 100_000)]
    pub n_eval: usize,
    #[arg(long)]
    pub skip_mc: bool,
    /// Loss traces as `iteration,method,loss,gap`.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Also run the gap-versus-n study and write it here.
    #[arg(long)]
    pub scaling_out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    pub scaling_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
    pub scaling_ns: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub scaling_seeds: u64,
    #[arg(long, default_value_t = 10_000)]
    pub scaling_m: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Gaussian,
    Binary,
    TwoPoint,
    Sphere,
}

#[derive(Debug, clap::Args)]
pub struct OracleArgs {
    #[arg(long, value_enum)]
    pub source: OracleKind,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Bernoulli parameter for the binary source.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Comma-separated grid: distortions for gaussian and binary, lambdas otherwise.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[arg(long, value_enum, default_value = "nats")]
    pub units: Units,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub from: Option<DatasetFormat>,
    #[arg(long, value_enum)]
    pub to: Option<DatasetFormat>,
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Data(#[from] dataset::DatasetError),
    #[error(transparent)]
    Output(#[from] output::OutputError),
    #[error("{0}")]
    Numeric(rdwgd_core::Error),
}

impl Failure {
    fn exit(&self) -> Exit {
        match self {
            Failure::Config(_) => Exit::Config,
            Failure::Data(_) | Failure::Output(_) => Exit::Data,
            Failure::Numeric(_) => Exit::Numeric,
        }
    }
}

/// Core errors that stem from bad parameters count as configuration errors.
fn classify(e: rdwgd_core::Error) -> Failure {
    use rdwgd_core::Error as E;
    match e {
        E::InvalidParameter { .. } | E::OutOfSegment { .. } | E::Unsupported(_) | E::InvalidBatch => {
            Failure::Config(config::ConfigError::Invalid(e.to_string()))
        }
        e => Failure::Numeric(e),
    }
}

/// Caps the global thread pool at `RDWGD_THREADS` if set.
pub fn init_thread_pool() {
    let Ok(v) = std::env::var("RDWGD_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("RDWGD_THREADS ignored: {e}");
            }
        }
        _ => warn!("RDWGD_THREADS={v:?} is not a positive integer; ignored"),
    }
}

/// Runs a parsed command line and returns the exit status.
pub fn run(cli: Cli) -> Exit {
    let result = match cli.command {
        Command::Sweep(a) => sweep_cmd(a),
        Command::Deconv(a) => deconv_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Convert(a) => convert_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit()
        }
    }
}

/// Merges defaults, the optional JSON file and the flags.
pub fn resolve_sweep_config(args: &SweepArgs) -> Result<SweepConfig, config::ConfigError> {
    let file = match &args.config {
        Some(p) => SweepOverrides::from_json_file(p)?,
        None => SweepOverrides::default(),
    };
    let cfg = args.overrides.clone().over(file).apply(SweepConfig::default());
    cfg.validate()?;
    Ok(cfg)
}

fn sweep_cmd(args: SweepArgs) -> Result<Exit, Failure> {
    let cfg = resolve_sweep_config(&args)?;
    let format = args.format.unwrap_or_else(|| DatasetFormat::from_path(&args.data));
    let data = dataset::read_dataset(&args.data, format)?;
    info!(
        "sweep: {} points in {} dimensions, method {}, {} lambdas",
        data.len(),
        data.dim(),
        cfg.method,
        cfg.lambdas.len()
    );
    let report = sweep::run_sweep(&cfg, &data);
    sweep::write_sweep_outputs(&report, &cfg)?;
    if cfg.out.is_none() && !report.results.is_empty() {
        let mut stdout = std::io::stdout().lock();
        output::render_rd_csv(&mut stdout, &report.points(), cfg.units).map_err(|source| {
            output::OutputError::Io {
                path: "<stdout>".into(),
                source,
            }
        })?;
    }
    for line in report.summary_lines() {
        eprintln!("{line}");
    }
    Ok(if report.failures.is_empty() {
        Exit::Ok
    } else {
        Exit::Numeric
    })
}

fn deconv_cmd(a: DeconvArgs) -> Result<Exit, Failure> {
    let schedule = StepSchedule::InverseDecay {
        gamma0: a.gamma0,
        decay: a.decay,
    };
    schedule.validate().map_err(classify)?;
    let cfg = DeconvConfig {
        dim: a.dim,
        sigma2: a.sigma2,
        lambda: a.lambda,
        n: a.n,
        m: a.m,
        iters: a.iters,
        methods: a.methods.clone(),
        schedule,
        seed: a.seed,
        band: a.band,
        m_eval: a.m_eval,
        n_eval: a.n_eval,
        skip_mc: a.skip_mc,
    };
    let report = deconv::run_deconv_benchmark(&cfg).map_err(classify)?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    if let Some(path) = &a.trace_out {
        output::write_with(path, |w| report.write_traces(w))?;
    }
    if let Some(path) = &a.report_out {
        output::write_with(path, |w| {
            serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::other)
        })?;
    }
    if let Some(path) = &a.scaling_out {
        let study = ScalingConfig {
            dims: a.scaling_dims.clone(),
            ns: a.scaling_ns.clone(),
            seeds: (0..a.scaling_seeds).collect(),
            sigma2: a.sigma2,
            lambda: Some(a.lambda),
            m: a.scaling_m,
            iters: a.iters,
            methods: a.methods.clone(),
            schedule,
        };
        let rows = deconv::run_scaling_study(&study).map_err(classify)?;
        output::write_with(path, |w| deconv::write_scaling_csv(w, &rows))?;
    }
    Ok(Exit::Ok)
}

fn oracle_cmd(a: OracleArgs) -> Result<Exit, Failure> {
    let source = match a.source {
        OracleKind::Gaussian => OracleSource::Gaussian { sigma2: a.sigma2 },
        OracleKind::Binary => OracleSource::Binary { p: a.p },
        OracleKind::TwoPoint => OracleSource::TwoPoint { sigma2: a.sigma2 },
        OracleKind::Sphere => OracleSource::Sphere {
            sigma2: a.sigma2,
            dim: a.dim,
        },
    };
    let curve = oracle::run_oracle(&source, &a.grid).map_err(classify)?;
    for note in &curve.notes {
        eprintln!("{note}");
    }
    match &a.out {
        Some(path) => output::write_with(path, |w| oracle::write_oracle_csv(w, &source, &curve, a.units))?,
        None => oracle::write_oracle_csv(&mut std::io::stdout().lock(), &source, &curve, a.units).map_err(
            |source| output::OutputError::Io {
                path: "<stdout>".into(),
                source,
            },
        )?,
    }
    Ok(Exit::Ok)
}

fn convert_cmd(a: ConvertArgs) -> Result<Exit, Failure> {
    let from = a.from.unwrap_or_else(|| DatasetFormat::from_path(&a.input));
    let to = a.to.unwrap_or_else(|| DatasetFormat::from_path(&a.output));
    let data = dataset::read_dataset(&a.input, from)?;
    dataset::write_dataset(&a.output, to, &data)?;
    info!("wrote {} points of dimension {} to {}", data.len(), data.dim(), a.output.display());
    Ok(Exit::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"method": "ba", "n": 7, "lambdas": [2.0, 3.0]}"#).unwrap();
        let cli = Cli::parse_from(["rdwgd", "sweep", "--data", "x.csv", "--config", path.to_str().unwrap(), "--n", "9"]);
        let Command::Sweep(args) = cli.command else { panic!() };
        let cfg = resolve_sweep_config(&args).unwrap();
        assert_eq!(cfg.method, Method::Ba);
        assert_eq!(cfg.n, 9);
        assert_eq!(cfg.lambdas, vec![2.0, 3.0]);
    }

    #[test]
    fn unknown_config_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"particles": 7}"#).unwrap();
        let cli = Cli::parse_from(["rdwgd", "sweep", "--data", "x.csv", "--config", path.to_str().unwrap()]);
        assert_eq!(run(cli), Exit::Config);
    }

    #[test]
    fn missing_data_is_a_data_error() {
        let cli = Cli::parse_from(["rdwgd", "sweep", "--data", "/nonexistent/x.csv", "--method", "ba"]);
        assert_eq!(run(cli), Exit::Data);
    }

    #[test]
    fn bare_boolean_flags() {
        let cli = Cli::parse_from(["rdwgd", "sweep", "--data", "x.csv", "--warm-start", "--timing"]);
        let Command::Sweep(args) = cli.command else { panic!() };
        assert_eq!(args.overrides.warm_start, Some(true));
        assert_eq!(args.overrides.timing, Some(true));
    }
}
