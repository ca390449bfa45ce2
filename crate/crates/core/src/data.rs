//! Observed data matrices and low-rank factor pairs.
//!
//! Observed entries are enumerated in column-major order (the storage order
//! of [`DMatrix`]). Every per-entry vector in the crate (residuals,
//! responsibilities, prox weights) follows that enumeration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A data matrix `Y` together with its observation mask.
#[derive(Debug, Clone)]
pub struct ObservedMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    omega: Vec<(usize, usize)>,
}

impl ObservedMatrix {
    /// Builds an observed matrix from values and a same-shape mask.
    ///
    /// Values at unobserved positions are ignored and stored as zero.
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "values are {}x{} but mask is {}x{}",
                values.nrows(),
                values.ncols(),
                mask.nrows(),
                mask.ncols()
            )));
        }
        let mut values = values;
        let mut omega = Vec::new();
        for j in 0..values.ncols() {
            for i in 0..values.nrows() {
                if mask[(i, j)] {
                    if !values[(i, j)].is_finite() {
                        return Err(Error::NonFinite(format!("observed entry ({i}, {j})")));
                    }
                    omega.push((i, j));
                } else {
                    values[(i, j)] = 0.0;
                }
            }
        }
        Ok(Self {
            values,
            mask,
            omega,
        })
    }

    /// Every entry observed.
    pub fn fully_observed(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask)
    }

    /// Treats `NaN` entries as missing.
    pub fn from_nan_encoded(values: DMatrix<f64>) -> Result<Self> {
        let mask = values.map(|v| !v.is_nan());
        Self::new(values, mask)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Values with unobserved entries zeroed.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    /// Observed coordinates in column-major order.
    pub fn omega(&self) -> &[(usize, usize)] {
        &self.omega
    }

    pub fn omega_size(&self) -> usize {
        self.omega.len()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    /// Observed values in `omega()` order.
    pub fn observed_values(&self) -> Vec<f64> {
        self.omega
            .iter()
            .map(|&(i, j)| self.values[(i, j)])
            .collect()
    }

    /// Frobenius norm over observed entries.
    pub fn observed_norm(&self) -> f64 {
        self.values.norm()
    }

    /// `y_ij - (U V^T)_ij` over observed entries, in `omega()` order.
    pub fn residuals(&self, factors: &FactorPair) -> Vec<f64> {
        let product = factors.product();
        self.residuals_from_product(&product)
    }

    pub fn residuals_from_product(&self, product: &DMatrix<f64>) -> Vec<f64> {
        self.omega
            .iter()
            .map(|&(i, j)| self.values[(i, j)] - product[(i, j)])
            .collect()
    }

    /// Fails unless `|Ω| >= r (m + n)`.
    pub fn check_rank_requirement(&self, rank: usize) -> Result<()> {
        let required = rank * (self.nrows() + self.ncols());
        if rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if rank > self.nrows().min(self.ncols()) {
            return Err(Error::InvalidParameter(format!(
                "rank {rank} exceeds min dimension of {}x{}",
                self.nrows(),
                self.ncols()
            )));
        }
        if self.omega_size() < required {
            return Err(Error::TooFewObserved {
                observed: self.omega_size(),
                required,
                rank,
            });
        }
        Ok(())
    }
}

/// Low-rank factors `U` (m x r) and `V` (n x r) with `Y ~ U V^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl FactorPair {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::Shape(format!(
                "U has {} columns but V has {}",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(Self { u, v })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_is_column_major_and_masked_values_zeroed() {
        let values = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, f64::NAN]);
        let y = ObservedMatrix::from_nan_encoded(values).unwrap();
        assert_eq!(y.omega(), &[(0, 0), (1, 0), (0, 1)]);
        assert_eq!(y.values()[(1, 1)], 0.0);
        assert_eq!(y.observed_values(), vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let values = DMatrix::zeros(2, 3);
        let mask = DMatrix::from_element(3, 2, true);
        assert!(matches!(
            ObservedMatrix::new(values, mask),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_observed_value_is_rejected() {
        let values = DMatrix::from_row_slice(1, 2, &[1.0, f64::INFINITY]);
        assert!(matches!(
            ObservedMatrix::fully_observed(values),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rank_requirement() {
        let y = ObservedMatrix::fully_observed(DMatrix::zeros(4, 3)).unwrap();
        assert!(y.check_rank_requirement(1).is_ok());
        assert!(matches!(
            y.check_rank_requirement(2),
            Err(Error::TooFewObserved { required: 14, .. })
        ));
        assert!(y.check_rank_requirement(4).is_err());
    }
}
