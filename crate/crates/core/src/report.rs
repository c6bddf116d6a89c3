//! Output helpers. Floats in CSV use 17 significant digits; JSON uses
//! serde_json's shortest round-trip representation, which is also exact.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// 17 significant digits in scientific notation; parses back bit-exactly.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a numeric table with a header row.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt17(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV written by [`write_table_csv`].
pub fn read_table_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| crate::Error::InvalidInput(format!("bad float {s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![0.1, 1.0 / 3.0, -2.5e-300], vec![std::f64::consts::PI, 1e17 + 1.0, f64::MIN_POSITIVE]];
        write_table_csv(&path, &["a", "b", "c"], &rows).unwrap();
        let (h, back) = read_table_csv(&path).unwrap();
        assert_eq!(h, ["a", "b", "c"]);
        for (r, s) in rows.iter().zip(&back) {
            for (u, v) in r.iter().zip(s) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        write_table_csv(&path, &["a"], &[]).unwrap();
        let (_, back) = read_table_csv(&path).unwrap();
        assert!(back.is_empty());
    }
}
