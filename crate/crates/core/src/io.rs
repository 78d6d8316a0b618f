//! JSON and CSV helpers shared by the serializable types.

use std::fmt::Write as _;

use crate::algebra::{Mat, Vector};
use crate::error::{Error, Result};

/// Row-major nested arrays, the JSON form of a matrix.
pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix entries must be finite".into()));
    }
    Ok(Mat::from_row_slice(nrows, ncols, &flat))
}

pub fn vector_from_slice(v: &[f64]) -> Result<Vector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("vector entries must be finite".into()));
    }
    Ok(Vector::from_column_slice(v))
}

/// Formats a float with 17 significant digits, enough to round-trip an f64.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    format!("{v:.16e}")
}

/// Joins a row of floats with commas.
pub fn csv_row(values: impl IntoIterator<Item = f64>) -> String {
    let mut line = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        let _ = write!(line, "{}", fmt_f64(v));
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, std::f64::consts::PI] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(mat_from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let m = mat_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(mat_to_rows(&m), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
