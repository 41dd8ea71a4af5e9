//! CSV and JSON writers with fixed float formatting.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};

/// `x` rounded to 9 significant digits, printed in shortest form.
pub fn fmt9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.into(), source })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Parse { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse { path: path.into(), source })
}

/// Writes a header row and string rows.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let csv_err = |source| CliError::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| CliError::Io { path: path.into(), source })
}

/// Reads numeric rows; uses the `q0, q1, …` columns when present, all columns otherwise.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let csv_err = |source| CliError::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let q_cols: Vec<usize> = (0..)
        .map_while(|i| header.iter().position(|h| h.trim() == format!("q{i}")))
        .collect();
    let cols: Vec<usize> = if q_cols.is_empty() { (0..header.len()).collect() } else { q_cols };
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = cols
            .iter()
            .map(|&c| {
                rec.get(c).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| {
                    CliError::invalid("dataset", format!("{}: row {} column {} is not a number", path.display(), line + 1, c + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
