//! Design matrices as CSV: one row per time point, one column per regressor,
//! with an optional header row of names.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub names: Option<Vec<String>>,
}

/// A first row is a header when any of its fields fails to parse as a number.
pub fn parse_design(text: &str) -> Result<Design> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("design row {}: {e}", i + 1)))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => names = Some(rec.iter().map(String::from).collect()),
            Err(e) => return Err(Error::Format(format!("design row {}: {e}", i + 1))),
        }
    }
    let k = match (&names, rows.first()) {
        (_, None) => return Err(Error::Format("design has no data rows".into())),
        (Some(h), Some(_)) => h.len(),
        (None, Some(r)) => r.len(),
    };
    let offset = usize::from(names.is_some()) + 1;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(Error::Format(format!(
                "design row {}: {} columns, expected {k}",
                i + offset,
                r.len()
            )));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("design row {}: non-finite value", i + offset)));
        }
    }
    let x = DMatrix::from_fn(rows.len(), k, |t, c| rows[t][c]);
    Ok(Design { x, names })
}

pub fn read_design(path: &Path) -> Result<Design> {
    parse_design(&std::fs::read_to_string(path)?)
}

pub fn write_design(path: &Path, x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(names).map_err(csv_err)?;
    for t in 0..x.nrows() {
        w.write_record(x.row(t).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
