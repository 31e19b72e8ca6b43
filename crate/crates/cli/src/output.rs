//! CSV writers. Reals are printed with 17 significant digits so that files
//! round-trip and identical runs give identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rdwgd_core::RDPoint;

use crate::config::Units;

pub const RD_HEADER: &str = "lambda,distortion,rate,loss,n_atoms,method,iterations,wall_ms,units";

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("nothing to write to {0}")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `{:.16e}`: 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Points ordered by method, then lambda descending.
pub fn sorted_points(points: &[RDPoint]) -> Vec<&RDPoint> {
    let mut sorted: Vec<&RDPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.meta.solver.cmp(&b.meta.solver).then(b.lambda.total_cmp(&a.lambda)));
    sorted
}

/// Renders the R-D CSV. Rate and loss are converted to `units`.
pub fn render_rd_csv<W: Write>(w: &mut W, points: &[RDPoint], units: Units) -> std::io::Result<()> {
    writeln!(w, "{RD_HEADER}")?;
    for p in sorted_points(points) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            real(p.lambda),
            real(p.distortion),
            real(units.convert(p.rate)),
            real(units.convert(p.loss)),
            p.n_atoms,
            p.meta.solver,
            p.meta.iterations,
            real(p.meta.wall_ms),
            units.label()
        )?;
    }
    Ok(())
}

pub fn write_rd_csv(points: &[RDPoint], path: &Path, units: Units) -> Result<(), OutputError> {
    if points.is_empty() {
        return Err(OutputError::Empty(path.to_path_buf()));
    }
    write_with(path, |w| render_rd_csv(w, points, units))
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_with<F>(path: &Path, body: F) -> Result<(), OutputError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let io = |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    body(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

/// `iteration,loss,grad_norm_sq` rows; missing values are left empty.
pub fn render_trace<W: Write>(
    w: &mut W,
    loss: &[(usize, f64)],
    grad_norm: &[(usize, f64)],
    units: Units,
) -> std::io::Result<()> {
    writeln!(w, "iteration,loss,grad_norm_sq")?;
    let mut g = grad_norm.iter().peekable();
    for &(t, l) in loss {
        while g.peek().is_some_and(|(s, _)| *s < t) {
            g.next();
        }
        let gn = match g.peek() {
            Some(&&(s, v)) if s == t => real(v),
            _ => String::new(),
        };
        writeln!(w, "{t},{},{gn}", real(units.convert(l)))?;
    }
    Ok(())
}
