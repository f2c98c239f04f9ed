//! Row-major nested-array (de)serialization for dense matrices.
//!
//! A matrix with zero rows serializes as `[]` and deserializes as `0x0`;
//! owners that know the expected shape restore it with [`fit_empty`].

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Result};

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return dim_err("ragged matrix rows");
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Replaces an empty matrix by a zero matrix of the expected shape and
/// checks the shape of nonempty ones.
pub fn fit_empty(m: DMatrix<f64>, rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(DMatrix::zeros(rows, cols));
    }
    if m.shape() != (rows, cols) {
        return dim_err(format!("{name}: expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()));
    }
    Ok(m)
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    from_rows(&rows).map_err(serde::de::Error::custom)
}

/// `Option<DMatrix>` as `null` or nested rows.
pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DMatrix<f64>>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            Some(rows) => from_rows(&rows).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = to_rows(&m);
        assert_eq!(rows, vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(from_rows(&rows).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn empty_is_refitted() {
        let m = from_rows(&[]).unwrap();
        assert_eq!(fit_empty(m, 0, 3, "x").unwrap().shape(), (0, 3));
        assert!(fit_empty(DMatrix::zeros(1, 2), 2, 2, "x").is_err());
    }
}
