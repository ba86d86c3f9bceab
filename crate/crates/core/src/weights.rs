//! Serde adapters for weight matrices: a matrix is written either as its
//! diagonal (`[a, b, c, d]`) or as a full list of rows.

use nalgebra::{SMatrix, SVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Diagonal(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

pub(crate) fn serialize<S: Serializer, const D: usize>(m: &SMatrix<f64, D, D>, ser: S) -> Result<S::Ok, S::Error> {
    let off_diagonal = (0..D).any(|i| (0..D).any(|j| i != j && m[(i, j)] != 0.0));
    if off_diagonal {
        let rows: Vec<Vec<f64>> = (0..D).map(|i| (0..D).map(|j| m[(i, j)]).collect()).collect();
        rows.serialize(ser)
    } else {
        (0..D).map(|i| m[(i, i)]).collect::<Vec<_>>().serialize(ser)
    }
}

pub(crate) fn deserialize<'de, De: Deserializer<'de>, const D: usize>(de: De) -> Result<SMatrix<f64, D, D>, De::Error> {
    match Repr::deserialize(de)? {
        Repr::Diagonal(d) if d.len() == D => Ok(SMatrix::from_diagonal(&SVector::<f64, D>::from_column_slice(&d))),
        Repr::Diagonal(d) => Err(De::Error::custom(format!("expected {D} diagonal entries, got {}", d.len()))),
        Repr::Rows(rows) => {
            if rows.len() != D || rows.iter().any(|r| r.len() != D) {
                return Err(De::Error::custom(format!("expected a {D}x{D} matrix")));
            }
            Ok(SMatrix::from_fn(|i, j| rows[i][j]))
        }
    }
}
