//! Fusion of several quadratic penalties on one decision variable.
//!
//! A sum of terms `(x - r_i)' Q_i (x - r_i)` expands to
//! `x' Q_T x - 2 y_T' x + Z_T` with `Q_T = sum Q_i`, `y_T = sum Q_i r_i` and
//! `Z_T = sum r_i' Q_i r_i`. Completing the square gives the center
//! `Q_T^{-1} y_T` and the remainder `Z_T - y_T' Q_T^{-1} y_T`.

use nalgebra::{Cholesky, Const, DMatrix, SMatrix, SVector};
use thiserror::Error;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadformError {
    #[error("cannot combine an empty list of quadratic terms")]
    Empty,
    #[error("weight matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("weight matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("non-finite entry in quadratic term")]
    NonFinite,
    #[error("sum of {terms} weight matrices Q_T is not positive definite; the center is undefined")]
    SingularSum { terms: usize },
}

/// One penalty `(x - reference)' weight (x - reference)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticTerm<const D: usize> {
    pub weight: SMatrix<f64, D, D>,
    pub reference: SVector<f64, D>,
}

impl<const D: usize> QuadraticTerm<D> {
    /// Validates symmetry and positive semidefiniteness of `weight`.
    pub fn new(weight: SMatrix<f64, D, D>, reference: SVector<f64, D>) -> Result<Self, QuadformError> {
        if weight.iter().chain(reference.iter()).any(|x| !x.is_finite()) {
            return Err(QuadformError::NonFinite);
        }
        let asym = (weight - weight.transpose()).amax();
        let scale = weight.amax().max(1.0);
        if asym > SYMMETRY_TOL * scale {
            return Err(QuadformError::NotSymmetric(asym));
        }
        let sym = (weight + weight.transpose()) * 0.5;
        // dynamic copy: the static eigen-solver needs dimension bounds a const generic lacks
        let min_eig = DMatrix::from_column_slice(D, D, sym.as_slice()).symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL * scale {
            return Err(QuadformError::NotPsd(min_eig));
        }
        Ok(Self { weight, reference })
    }

    pub fn evaluate(&self, x: &SVector<f64, D>) -> f64 {
        let d = x - self.reference;
        d.dot(&(self.weight * d))
    }
}

/// `x' q x - 2 y' x + z`, the fused form of several [`QuadraticTerm`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedQuadratic<const D: usize> {
    pub q: SMatrix<f64, D, D>,
    pub y: SVector<f64, D>,
    pub z: f64,
    center: SVector<f64, D>,
}

/// Fuses `terms` into one quadratic. Requires the summed weight to be
/// positive definite; individual terms may be degenerate.
pub fn combine<const D: usize>(terms: &[QuadraticTerm<D>]) -> Result<CombinedQuadratic<D>, QuadformError> {
    if terms.is_empty() {
        return Err(QuadformError::Empty);
    }
    let mut q = SMatrix::<f64, D, D>::zeros();
    let mut y = SVector::<f64, D>::zeros();
    let mut z = 0.0;
    for t in terms {
        let qr = t.weight * t.reference;
        q += t.weight;
        y += qr;
        z += t.reference.dot(&qr);
    }
    CombinedQuadratic::from_parts(q, y, z).map_err(|e| match e {
        QuadformError::SingularSum { .. } => QuadformError::SingularSum { terms: terms.len() },
        other => other,
    })
}

impl<const D: usize> CombinedQuadratic<D> {
    /// Builds the fused form directly; `q` must be symmetric positive definite.
    pub fn from_parts(q: SMatrix<f64, D, D>, y: SVector<f64, D>, z: f64) -> Result<Self, QuadformError> {
        if q.iter().chain(y.iter()).any(|x| !x.is_finite()) || !z.is_finite() {
            return Err(QuadformError::NonFinite);
        }
        let asym = (q - q.transpose()).amax();
        if asym > SYMMETRY_TOL * q.amax().max(1.0) {
            return Err(QuadformError::NotSymmetric(asym));
        }
        let chol = Cholesky::<f64, Const<D>>::new(q).ok_or(QuadformError::SingularSum { terms: 1 })?;
        let center = chol.solve(&y);
        Ok(Self { q, y, z, center })
    }

    /// `Q_T^{-1} y_T`, the minimizer of the fused quadratic.
    pub fn center(&self) -> SVector<f64, D> {
        self.center
    }

    /// Constant left over after completing the square: `Z_T - y_T' Q_T^{-1} y_T`.
    pub fn remainder(&self) -> f64 {
        self.z - self.y.dot(&self.center)
    }

    pub fn evaluate(&self, x: &SVector<f64, D>) -> f64 {
        x.dot(&(self.q * x)) - 2.0 * self.y.dot(x) + self.z
    }

    /// Completed-square evaluation given a precomputed deviation from the
    /// center. Lets callers substitute a wrapped difference for angles.
    pub fn evaluate_deviation(&self, dev: &SVector<f64, D>) -> f64 {
        dev.dot(&(self.q * dev)) + self.remainder()
    }

    /// Elementwise sum of two fused forms.
    pub fn add(&self, other: &Self) -> Result<Self, QuadformError> {
        Self::from_parts(self.q + other.q, self.y + other.y, self.z + other.z)
    }

    /// Scales every constituent weight by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self, QuadformError> {
        Self::from_parts(self.q * s, self.y * s, self.z * s)
    }
}

/// Center of an already-combined form, re-solved from `(q, y)`.
pub fn center<const D: usize>(c: &CombinedQuadratic<D>) -> Result<SVector<f64, D>, QuadformError> {
    let chol = Cholesky::<f64, Const<D>>::new(c.q).ok_or(QuadformError::SingularSum { terms: 1 })?;
    Ok(chol.solve(&c.y))
}
