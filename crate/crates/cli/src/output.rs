//! Result files: CSV tables with 17-significant-digit floats, LF line
//! endings, and the literal token NA for unavailable cells, plus the JSON
//! run summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::CliError;

/// Formats a float with 17 significant digits, or NA when non-finite.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "NA".to_string()
    }
}

pub enum Cell {
    Int(usize),
    Float(f64),
    Missing,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new(header: Vec<String>) -> Self {
        CsvTable {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Int(v) => v.to_string(),
                    Cell::Float(v) => fmt_float(*v),
                    Cell::Missing => "NA".to_string(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(path, out)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// Column names like `mean_1 .. mean_d`.
pub fn indexed_columns(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("{prefix}_{k}")).collect()
}

pub fn vector_cells(v: &DVector<f64>) -> Vec<Cell> {
    v.iter().map(|&x| Cell::Float(x)).collect()
}

/// Writes `truth.csv` (t, x_1..x_d) and `obs.csv` (t, y_1..y_q) for rows
/// t = 1..T.
pub fn write_truth_and_obs(
    dir: &Path,
    states: &[DVector<f64>],
    observations: &[DVector<f64>],
) -> Result<(), CliError> {
    let d = states.first().map_or(0, |x| x.len());
    let mut header = vec!["t".to_string()];
    header.extend(indexed_columns("x", d));
    let mut truth = CsvTable::new(header);
    for (idx, x) in states.iter().enumerate() {
        let mut row = vec![Cell::Int(idx + 1)];
        row.extend(vector_cells(x));
        truth.push_row(row);
    }
    truth.write(&dir.join("truth.csv"))?;

    let q = observations.first().map_or(0, |y| y.len());
    let mut header = vec!["t".to_string()];
    header.extend(indexed_columns("y", q));
    let mut obs = CsvTable::new(header);
    for (idx, y) in observations.iter().enumerate() {
        let mut row = vec![Cell::Int(idx + 1)];
        row.extend(vector_cells(y));
        obs.push_row(row);
    }
    obs.write(&dir.join("obs.csv"))
}

/// Reads an `obs.csv`-formatted file back into observation vectors.
pub fn read_observations(path: &Path) -> Result<Vec<DVector<f64>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read obs_file {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config("obs_file is empty".into()))?;
    let ncols = header.split(',').count();
    if ncols < 2 {
        return Err(CliError::Config(
            "obs_file must have a t column and at least one y column".into(),
        ));
    }
    let mut observations = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(CliError::Config(format!(
                "obs_file line {}: expected {ncols} fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let values: Result<Vec<f64>, _> = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect();
        let values = values.map_err(|e| {
            CliError::Config(format!("obs_file line {}: {e}", lineno + 2))
        })?;
        observations.push(DVector::from_vec(values));
    }
    if observations.is_empty() {
        return Err(CliError::Config("obs_file contains no data rows".into()));
    }
    Ok(observations)
}

/// Creates the output directory, erroring on a file in the way.
pub fn ensure_dir(dir: &PathBuf) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `summary.json` with scalar results.
pub fn write_summary(dir: &Path, summary: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Runtime(format!("summary serialization failed: {e}")))?;
    text.push('\n');
    let path = dir.join("summary.json");
    let mut file = fs::File::create(&path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    file.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
