//! Closed-form and quadrature R-D points for overlaying on estimates.

use std::io::Write;

use rdwgd_core::sources::{binary_rd_oracle, gaussian_rd_oracle, rd_segment};
use rdwgd_core::ConvolvedSourceSpec;

use crate::config::Units;
use crate::output::real;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleSource {
    /// `N(0, sigma2)` under squared error, indexed by distortion.
    Gaussian { sigma2: f64 },
    /// Bernoulli(p) under Hamming distortion, indexed by distortion.
    Binary { p: f64 },
    /// `1/2 N(-1, sigma2) + 1/2 N(1, sigma2)` under half-squared error, indexed by lambda.
    TwoPoint { sigma2: f64 },
    /// Uniform unit sphere in `dim` dimensions plus noise, indexed by lambda.
    Sphere { sigma2: f64, dim: usize },
}

impl OracleSource {
    pub fn label(&self) -> &'static str {
        match self {
            OracleSource::Gaussian { .. } => "gaussian",
            OracleSource::Binary { .. } => "binary",
            OracleSource::TwoPoint { .. } => "two_point",
            OracleSource::Sphere { .. } => "sphere",
        }
    }

    fn distortion_label(&self) -> &'static str {
        match self {
            OracleSource::Gaussian { .. } => "squared",
            OracleSource::Binary { .. } => "hamming",
            _ => "half_squared",
        }
    }

    /// Whether the grid is a list of distortions rather than lambdas.
    pub fn indexed_by_distortion(&self) -> bool {
        matches!(self, OracleSource::Gaussian { .. } | OracleSource::Binary { .. })
    }
}

/// One oracle point; `rate` is in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePoint {
    pub lambda: Option<f64>,
    pub distortion: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleCurve {
    pub points: Vec<OraclePoint>,
    /// Grid values that were skipped, with the reason.
    pub notes: Vec<String>,
}

/// Evaluates the oracle at every grid value. For distortion-indexed sources
/// the grid holds distortions, otherwise lambdas.
pub fn run_oracle(source: &OracleSource, grid: &[f64]) -> rdwgd_core::Result<OracleCurve> {
    let mut curve = OracleCurve::default();
    for &v in grid {
        match source {
            OracleSource::Gaussian { sigma2 } => curve.points.push(OraclePoint {
                lambda: None,
                distortion: v,
                rate: gaussian_rd_oracle(*sigma2, v)?,
            }),
            OracleSource::Binary { p } => curve.points.push(OraclePoint {
                lambda: None,
                distortion: v,
                rate: binary_rd_oracle(*p, v)?,
            }),
            OracleSource::TwoPoint { sigma2 } | OracleSource::Sphere { sigma2, .. } => {
                let spec = match source {
                    OracleSource::TwoPoint { .. } => ConvolvedSourceSpec::two_point(*sigma2)?,
                    OracleSource::Sphere { dim, .. } => ConvolvedSourceSpec::sphere(1.0, *sigma2, *dim)?,
                    _ => unreachable!(),
                };
                match rd_segment(&spec, v) {
                    Ok(seg) => curve.points.push(OraclePoint {
                        lambda: Some(v),
                        distortion: seg.distortion,
                        rate: seg.rate,
                    }),
                    Err(e @ rdwgd_core::Error::OutOfSegment { .. }) => {
                        curve.notes.push(format!("skipped lambda={v}: {e}"))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(curve)
}

/// `source,lambda,distortion,distortion_kind,rate,units`; lambda is empty for
/// distortion-indexed sources.
pub fn write_oracle_csv<W: Write>(
    w: &mut W,
    source: &OracleSource,
    curve: &OracleCurve,
    units: Units,
) -> std::io::Result<()> {
    writeln!(w, "source,lambda,distortion,distortion_kind,rate,units")?;
    for p in &curve.points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            source.label(),
            p.lambda.map(real).unwrap_or_default(),
            real(p.distortion),
            source.distortion_label(),
            real(units.convert(p.rate)),
            units.label()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_rates() {
        let curve = run_oracle(&OracleSource::Gaussian { sigma2: 1.0 }, &[0.5, 0.25]).unwrap();
        assert_abs_diff_eq!(curve.points[0].rate, 0.346_573_6, epsilon = 1e-7);
        assert_abs_diff_eq!(curve.points[1].rate, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn two_point_segment_point() {
        let curve = run_oracle(&OracleSource::TwoPoint { sigma2: 0.1 }, &[10.0]).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_abs_diff_eq!(curve.points[0].distortion, 0.05, epsilon = 1e-15);
        assert!(curve.points[0].rate > 0.6 && curve.points[0].rate < std::f64::consts::LN_2);
    }

    #[test]
    fn out_of_segment_lambdas_are_skipped() {
        let source = OracleSource::Sphere { sigma2: 0.1, dim: 2 };
        let curve = run_oracle(&source, &[5.0, 20.0]).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.notes.len(), 1);
        assert!(curve.notes[0].contains("lambda=5"));
    }

    #[test]
    fn bits_divide_by_ln2() {
        let source = OracleSource::Binary { p: 0.5 };
        let curve = run_oracle(&source, &[0.0]).unwrap();
        let mut nats = Vec::new();
        let mut bits = Vec::new();
        write_oracle_csv(&mut nats, &source, &curve, Units::Nats).unwrap();
        write_oracle_csv(&mut bits, &source, &curve, Units::Bits).unwrap();
        let rate = |buf: &[u8]| -> f64 {
            let text = std::str::from_utf8(buf).unwrap();
            text.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap()
        };
        assert_abs_diff_eq!(rate(&nats), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(rate(&bits), 1.0, epsilon = 1e-15);
    }
}
