//! Plain-text outputs: CSV tables and two-column plot data.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::manifest::write_atomic;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::schema(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::schema(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads a CSV whose header must equal `header` exactly.
pub fn read_csv<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(HarnessError::Missing(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::schema(path, e))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| HarnessError::schema(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(HarnessError::schema(
            path,
            format!("expected columns {}, found {}", header.join(","), found.join(",")),
        ));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::schema(path, e)))
        .collect()
}

/// Whitespace separated `x y` lines under a `#` header naming the axes.
pub fn write_dat(path: &Path, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut text = format!("# {x_label} {y_label}\n");
    for (x, y) in points {
        text.push_str(&format!("{x} {y}\n"));
    }
    write_atomic(path, text.as_bytes())
}

/// The inverse of [`write_dat`]; returns the axis labels and the points.
pub fn read_dat(path: &Path) -> Result<((String, String), Vec<(f64, f64)>)> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut labels = (String::from("x"), String::from("y"));
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(h) = line.strip_prefix('#') {
            let mut it = h.split_whitespace();
            if let (Some(x), Some(y)) = (it.next(), it.next()) {
                labels = (x.to_string(), y.to_string());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| HarnessError::schema(path, format!("line {}: {e}", n + 1)))?;
        match vals[..] {
            [x, y] => points.push((x, y)),
            _ => return Err(HarnessError::schema(path, format!("line {} needs two columns", n + 1))),
        }
    }
    Ok((labels, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dat_round_trip_keeps_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dat");
        let pts = vec![(1.0, 0.1 + 0.2), (2.0, f64::INFINITY), (3.0, -1e-300)];
        write_dat(&p, "t", "E_t", &pts).unwrap();
        let ((x, y), back) = read_dat(&p).unwrap();
        assert_eq!((x.as_str(), y.as_str()), ("t", "E_t"));
        assert_eq!(back, pts);
    }
}
