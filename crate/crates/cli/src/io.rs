//! File formats: headerless numeric CSV for data and labels, JSON for specs
//! and estimates. Every write goes through a temporary file in the target
//! directory and is renamed into place.

use crate::CliError;
use mixmom::als::TraceEntry;
use mixmom::{Frame, MixtureEstimate};
use nalgebra::{DMatrix, DVector};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Write `contents` to `path` atomically.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    {
        let mut out = BufWriter::new(tmp.as_file());
        write(&mut out).map_err(|e| io_err(path, e))?;
        out.flush().map_err(|e| io_err(path, e))?;
    }
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// One row per coordinate, one column per sample, no header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => io_err(path, &e),
            _ => CliError::Config(format!("{}: {e}", path.display())),
        })?;
        if cols.is_some_and(|c| c != record.len()) {
            return Err(CliError::Config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                rows + 1,
                record.len(),
                cols.unwrap_or(0)
            )));
        }
        cols = Some(record.len());
        for field in &record {
            let x: f64 = field.trim().parse().map_err(|_| {
                CliError::Config(format!("{}: row {}: {field:?} is not a number", path.display(), rows + 1))
            })?;
            values.push(x);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CliError::Config(format!("{}: no data", path.display())))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    write_atomic(path, |out| {
        let mut line = String::new();
        for row in m.row_iter() {
            line.clear();
            for (c, x) in row.iter().enumerate() {
                if c > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{x}"));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    })
}

/// One line of comma-separated 0-based component indices.
pub fn read_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    let m = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    m.split([',', '\n', '\r'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Config(format!("{}: bad label {s:?}", path.display())))
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<(), CliError> {
    let text: Vec<String> = labels.iter().map(usize::to_string).collect();
    write_text(path, &(text.join(",") + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, |out| out.write_all(text.as_bytes()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Columns of an n x r matrix as a list of length-n lists.
pub fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

pub fn from_columns(cols: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let n = cols.first().map_or(0, Vec::len);
    if cols.is_empty() || n == 0 || cols.iter().any(|c| c.len() != n) {
        return Err(CliError::Config(format!("{what}: columns must be nonempty and of equal length")));
    }
    Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
}

/// Estimate file. `means` lists the columns (one per component) of the n x r
/// mean matrix, in the raw data frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
    #[serde(default)]
    pub converged: bool,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub final_cost: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EstimateFile {
    pub fn estimate(&self) -> Result<MixtureEstimate, CliError> {
        let means = from_columns(&self.means, "means")?;
        if self.weights.len() != means.ncols() {
            return Err(CliError::Config(format!(
                "{} weights for {} mean columns",
                self.weights.len(),
                means.ncols()
            )));
        }
        Ok(MixtureEstimate {
            weights: DVector::from_column_slice(&self.weights),
            means,
            frame: Frame::Raw,
        })
    }
}

/// General-means file: `values` lists the columns of the n x r matrix of
/// `E_j[g(X)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralMeansFile {
    pub g: String,
    pub values: Vec<Vec<f64>>,
    #[serde(default)]
    pub residuals: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}
