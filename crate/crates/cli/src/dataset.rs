//! Dataset files: headerless CSV and the little-endian `rdsamp1` binary layout.
//!
//! `rdsamp1` is the 8-byte magic `RDSAMP01`, a `u32` dimension, a `u64` row
//! count, then `m * d` `f64` values in row-major order, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rdwgd_core::DiscreteMeasure;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"RDSAMP01";
const HEADER_LEN: u64 = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Csv,
    Rdsamp1,
}

impl DatasetFormat {
    /// `.csv` and `.txt` are CSV; anything else is `rdsamp1`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv" | "txt") => DatasetFormat::Csv,
            _ => DatasetFormat::Rdsamp1,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"RDSAMP01\"")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes, found {found} (payload ends at byte {found})")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing data after byte {expected}")]
    Trailing { expected: u64 },
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: usize, found: usize },
    #[error("line {line}, field {field}: cannot parse {text:?} as a number")]
    BadNumber { line: u64, field: usize, text: String },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(#[from] rdwgd_core::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a dataset as a uniform empirical measure.
pub fn read_dataset(path: &Path, format: DatasetFormat) -> Result<DiscreteMeasure> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    match format {
        DatasetFormat::Csv => read_csv(reader),
        DatasetFormat::Rdsamp1 => read_rdsamp1(reader),
    }
}

pub fn write_dataset(path: &Path, format: DatasetFormat, data: &DiscreteMeasure) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        DatasetFormat::Csv => write_csv(&mut w, data),
        DatasetFormat::Rdsamp1 => write_rdsamp1(&mut w, data),
    }
    .map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Rows of comma-separated reals, no header. Blank lines are skipped.
pub fn read_csv<R: Read>(reader: R) -> Result<DiscreteMeasure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut points = Vec::new();
    let mut dim = None;
    for record in rdr.records() {
        let record = record.map_err(|e| DatasetError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let expected = *dim.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DatasetError::Ragged {
                line,
                expected,
                found: record.len(),
            });
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DatasetError::BadNumber {
                line,
                field: k + 1,
                text: field.to_string(),
            })?;
            points.push(v);
        }
    }
    let dim = dim.ok_or(DatasetError::Invalid(rdwgd_core::Error::EmptyDataset))?;
    Ok(DiscreteMeasure::uniform(points, dim)?)
}

/// Shortest round-trip decimal form of each value.
pub fn write_csv<W: Write>(w: &mut W, data: &DiscreteMeasure) -> std::io::Result<()> {
    for (p, _) in data.iter() {
        let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_rdsamp1<R: Read>(mut reader: R) -> Result<DiscreteMeasure> {
    let mut header = [0u8; HEADER_LEN as usize];
    let got = read_full(&mut reader, &mut header)?;
    if got >= 8 && &header[..8] != MAGIC || got < 8 && header[..got] != MAGIC[..got] {
        return Err(DatasetError::BadMagic);
    }
    if got < header.len() {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            found: got as u64,
        });
    }
    let d = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let m = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
    let expected = (m as u128) * (d as u128) * 8 + HEADER_LEN as u128;
    let expected = u64::try_from(expected).map_err(|_| DatasetError::Truncated {
        expected: u64::MAX,
        found: HEADER_LEN,
    })?;
    let payload_len = (expected - HEADER_LEN) as usize;
    let mut payload = Vec::new();
    reader
        .by_ref()
        .take(payload_len as u64)
        .read_to_end(&mut payload)
        .map_err(io_err(Path::new("<input>")))?;
    if payload.len() < payload_len {
        return Err(DatasetError::Truncated {
            expected,
            found: HEADER_LEN + payload.len() as u64,
        });
    }
    let mut extra = [0u8; 1];
    if read_full(&mut reader, &mut extra)? > 0 {
        return Err(DatasetError::Trailing { expected });
    }
    let points = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(DiscreteMeasure::uniform(points, d)?)
}

pub fn write_rdsamp1<W: Write>(w: &mut W, data: &DiscreteMeasure) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(data.dim() as u32).to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data.points() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(Path::new("<input>"))(e)),
        }
    }
    Ok(filled)
}
