//! Plain CSV matrices and two-column curves.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::CliError;

/// Reads a header-less numeric CSV. `nan` fields are kept as NaN.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "input not found: {}",
            path.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    CliError::Usage(format!(
                        "{}:{}: cannot parse '{field}' as a number",
                        path.display(),
                        line + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    let Some(ncols) = rows.first().map(Vec::len) else {
        return Err(CliError::Usage(format!("{} is empty", path.display())));
    };
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(CliError::Shape(format!(
            "{}: row {} has {} fields, expected {ncols}",
            path.display(),
            i + 1,
            row.len()
        )));
    }
    let nrows = rows.len();
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Reads a 0/1 mask of the given shape.
pub fn read_mask(path: &Path, shape: (usize, usize)) -> Result<DMatrix<bool>, CliError> {
    let raw = read_matrix(path)?;
    if raw.shape() != shape {
        return Err(CliError::Shape(format!(
            "mask is {}x{} but the data is {}x{}",
            raw.nrows(),
            raw.ncols(),
            shape.0,
            shape.1
        )));
    }
    if let Some(v) = raw.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(CliError::Usage(format!(
            "mask entries must be 0 or 1, found {v}"
        )));
    }
    Ok(raw.map(|v| v == 1.0))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("cannot write {}: {e}", path.display()))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writer.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

/// Header row followed by string records.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    writer.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

/// `x,density` pairs.
pub fn write_curve(path: &Path, points: &[(f64, f64)]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|(x, d)| vec![x.to_string(), d.to_string()])
        .collect();
    write_table(path, &["x", "density"], &rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| io_err(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}
