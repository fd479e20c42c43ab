//! CSV tables.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MpbmError, Result};

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| MpbmError::io(path, e))
}

pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn csv_err(path: &Path, e: csv::Error) -> MpbmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MpbmError::io(path, io),
        other => MpbmError::Format {
            format: "csv",
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Full-precision float formatting for CSV cells.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Rows `[group..., domain, mean, std, n]` from per-seed accuracies keyed by
/// `(group, domain)`.
pub fn summary_rows(per_seed: &BTreeMap<(String, String), Vec<f64>>) -> Vec<Vec<String>> {
    per_seed
        .iter()
        .map(|((group, domain), v)| {
            let (m, s) = mean_std(v);
            vec![group.clone(), domain.clone(), num(m), num(s), v.len().to_string()]
        })
        .collect()
}
