//! Sweep configuration: defaults, JSON config files and command-line flags.
//!
//! A JSON config uses the same kebab-case keys as the flags. Flags given on
//! the command line win over the file, and the file wins over defaults.

use std::path::{Path, PathBuf};

use rdwgd_core::{DistortionKind, StepSchedule};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ba,
    Wgd,
    Hybrid,
    WgdEot,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ba => "ba",
            Method::Wgd => "wgd",
            Method::Hybrid => "hybrid",
            Method::WgdEot => "wgd_eot",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    #[default]
    Nats,
    Bits,
}

impl Units {
    /// Converts a value in nats.
    pub fn convert(self, nats: f64) -> f64 {
        match self {
            Units::Nats => nats,
            Units::Bits => nats / std::f64::consts::LN_2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Units::Nats => "nats",
            Units::Bits => "bits",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    InverseDecay,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionArg {
    HalfSquared,
    Squared,
    Hamming,
}

impl From<DistortionArg> for DistortionKind {
    fn from(d: DistortionArg) -> Self {
        match d {
            DistortionArg::HalfSquared => DistortionKind::HalfSquaredEuclidean,
            DistortionArg::Squared => DistortionKind::SquaredEuclidean,
            DistortionArg::Hamming => DistortionKind::Hamming,
        }
    }
}

/// Log-linear grid `1e4, 3e3, 1e3, ..., 1`.
pub fn default_lambdas() -> Vec<f64> {
    vec![1e4, 3e3, 1e3, 3e2, 1e2, 30.0, 10.0, 3.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub method: Method,
    /// Sorted descending, all positive.
    pub lambdas: Vec<f64>,
    pub n: usize,
    pub iters: usize,
    pub batch_size: Option<usize>,
    pub schedule: StepSchedule,
    pub seed: u64,
    pub distortion: DistortionKind,
    pub units: Units,
    /// Initialize each lambda from the previous (larger) lambda's solution.
    pub warm_start: bool,
    /// Stopping tolerance for BA.
    pub tol: f64,
    pub eval_size: usize,
    /// Record wall-clock time in the output (breaks byte reproducibility).
    pub timing: bool,
    pub out: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            method: Method::Wgd,
            lambdas: default_lambdas(),
            n: 20,
            iters: 1000,
            batch_size: None,
            schedule: StepSchedule::adam(0.01),
            seed: 0,
            distortion: DistortionKind::HalfSquaredEuclidean,
            units: Units::Nats,
            warm_start: false,
            tol: 1e-9,
            eval_size: 10_000,
            timing: false,
            out: None,
            trace_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    File { path: PathBuf, message: String },
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.lambdas.is_empty() {
            return bad("at least one lambda is required".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return bad(format!("lambdas must be positive and finite, got {l}"));
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.iters == 0 {
            return bad("iters must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch-size must be at least 1".into());
        }
        if self.method == Method::Hybrid && self.batch_size.is_some() {
            return bad("the hybrid method runs on the full batch only; drop batch-size".into());
        }
        if self.method != Method::Ba && !DistortionKind::is_differentiable(self.distortion) {
            return bad(format!("method {} needs a differentiable distortion", self.method));
        }
        self.schedule.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Lambdas in reporting order (descending), duplicates removed.
    pub fn sorted_lambdas(&self) -> Vec<f64> {
        let mut l = self.lambdas.clone();
        l.sort_by(|a, b| b.total_cmp(a));
        l.dedup();
        l
    }
}

/// Optional overrides, shared by the JSON config file and the flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SweepOverrides {
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Comma-separated list of lambda values.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub gamma0: Option<f64>,
    /// Inverse-decay rate.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub distortion: Option<DistortionArg>,
    #[arg(long, value_enum)]
    pub units: Option<Units>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub warm_start: Option<bool>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub timing: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

impl SweepOverrides {
    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Fields set in `self` replace those in `base`.
    pub fn over(self, base: SweepOverrides) -> SweepOverrides {
        macro_rules! pick {
            ($($f:ident),*) => { SweepOverrides { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(method, lambdas, n, iters, batch_size, schedule, gamma0, decay, seed, distortion, units,
              warm_start, tol, eval_size, timing, out, trace_dir)
    }

    pub fn apply(self, mut cfg: SweepConfig) -> SweepConfig {
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = self.lambdas {
            cfg.lambdas = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if self.batch_size.is_some() {
            cfg.batch_size = self.batch_size;
        }
        let gamma0 = self.gamma0.unwrap_or(cfg.schedule.gamma0());
        let kind = self.schedule.unwrap_or(match cfg.schedule {
            StepSchedule::Constant { .. } => ScheduleKind::Constant,
            StepSchedule::InverseDecay { .. } => ScheduleKind::InverseDecay,
            StepSchedule::AdaptiveMoment { .. } => ScheduleKind::Adam,
        });
        cfg.schedule = match kind {
            ScheduleKind::Constant => StepSchedule::Constant { gamma0 },
            ScheduleKind::InverseDecay => StepSchedule::InverseDecay {
                gamma0,
                decay: self.decay.unwrap_or(match cfg.schedule {
                    StepSchedule::InverseDecay { decay, .. } => decay,
                    _ => 0.01,
                }),
            },
            ScheduleKind::Adam => match cfg.schedule {
                StepSchedule::AdaptiveMoment {
                    beta1, beta2, offset, ..
                } => StepSchedule::AdaptiveMoment {
                    gamma0,
                    beta1,
                    beta2,
                    offset,
                },
                _ => StepSchedule::adam(gamma0),
            },
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.distortion {
            cfg.distortion = v.into();
        }
        if let Some(v) = self.units {
            cfg.units = v;
        }
        if let Some(v) = self.warm_start {
            cfg.warm_start = v;
        }
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.eval_size {
            cfg.eval_size = v;
        }
        if let Some(v) = self.timing {
            cfg.timing = v;
        }
        if self.out.is_some() {
            cfg.out = self.out;
        }
        if self.trace_dir.is_some() {
            cfg.trace_dir = self.trace_dir;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_match_flags() {
        let json = r#"{"method": "hybrid", "lambdas": [1.0, 10.0], "n": 5, "schedule": "inverse-decay", "gamma0": 0.2, "warm-start": true}"#;
        let file: SweepOverrides = serde_json::from_str(json).unwrap();
        let flags = SweepOverrides {
            n: Some(7),
            ..SweepOverrides::default()
        };
        let cfg = flags.over(file).apply(SweepConfig::default());
        assert_eq!(cfg.method, Method::Hybrid);
        assert_eq!(cfg.n, 7);
        assert!(cfg.warm_start);
        assert_eq!(cfg.schedule, StepSchedule::InverseDecay { gamma0: 0.2, decay: 0.01 });
        assert_eq!(cfg.sorted_lambdas(), vec![10.0, 1.0]);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<SweepOverrides>(r#"{"lambda": [1.0]}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SweepConfig::default();
        cfg.lambdas = vec![1.0, -2.0];
        assert!(cfg.validate().is_err());
        let mut cfg = SweepConfig::default();
        cfg.method = Method::Hybrid;
        cfg.batch_size = Some(10);
        assert!(cfg.validate().is_err());
        let mut cfg = SweepConfig::default();
        cfg.distortion = DistortionKind::Hamming;
        assert!(cfg.validate().is_err());
        cfg.method = Method::Ba;
        assert!(cfg.validate().is_ok());
        cfg.n = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn units() {
        assert_eq!(Units::Bits.convert(std::f64::consts::LN_2), 1.0);
        assert_eq!(Units::Nats.convert(0.5), 0.5);
    }
}
