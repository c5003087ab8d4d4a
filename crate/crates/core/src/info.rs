use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("information matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("information matrix has negative eigenvalue {0:e}")]
    NotPositiveSemiDefinite(f64),
    #[error("information matrix has non-finite entries")]
    NonFinite,
}

/// 6x6 symmetric positive semi-definite weight, `[rho; phi]` ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoMatrix(Matrix6<f64>);

impl InfoMatrix {
    pub fn new(m: Matrix6<f64>) -> Result<Self, InfoError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(InfoError::NonFinite);
        }
        let asym = (m - m.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(InfoError::NotSymmetric(asym));
        }
        let sym = (m + m.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(InfoError::NotPositiveSemiDefinite(min_eig));
        }
        Ok(Self(sym))
    }

    pub fn from_diagonal(d: [f64; 6]) -> Result<Self, InfoError> {
        Self::new(Matrix6::from_diagonal(&Vector6::from(d)))
    }

    /// Isotropic weights from standard deviations; a zero sigma gives zero weight.
    pub fn from_sigmas(sigma_t: f64, sigma_r: f64) -> Self {
        let w = |s: f64| if s > 0.0 { 1.0 / (s * s) } else { 0.0 };
        let (wt, wr) = (w(sigma_t), w(sigma_r));
        Self(Matrix6::from_diagonal(&Vector6::new(wt, wt, wt, wr, wr, wr)))
    }

    pub fn identity() -> Self {
        Self(Matrix6::identity())
    }

    pub fn zero() -> Self {
        Self(Matrix6::zeros())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn diagonal(&self) -> [f64; 6] {
        let d = self.0.diagonal();
        [d[0], d[1], d[2], d[3], d[4], d[5]]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0 * k)
    }
}

impl Default for InfoMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid() {
        let mut m = Matrix6::identity();
        m[(0, 1)] = 1.0;
        assert!(matches!(InfoMatrix::new(m), Err(InfoError::NotSymmetric(_))));
        assert!(matches!(
            InfoMatrix::from_diagonal([1.0, 1.0, -1.0, 1.0, 1.0, 1.0]),
            Err(InfoError::NotPositiveSemiDefinite(_))
        ));
        assert!(matches!(
            InfoMatrix::from_diagonal([f64::NAN, 1.0, 1.0, 1.0, 1.0, 1.0]),
            Err(InfoError::NonFinite)
        ));
        assert!(InfoMatrix::zero().is_zero());
    }

    #[test]
    fn sigma_weights() {
        let w = InfoMatrix::from_sigmas(0.5, 0.0);
        assert_eq!(w.diagonal(), [4.0, 4.0, 4.0, 0.0, 0.0, 0.0]);
    }
}
