use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_psd, sorted_eigen, symmetrize, JITTER_REL};

/// Laplace-approximated likelihood of one dataset over `λ = (f, ξ, φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvidence {
    pub dataset_id: String,
    lambda_hat: DVector<f64>,
    cov: DMatrix<f64>,
    regularized: DMatrix<f64>,
}

/// `cov + τI` with `τ = JITTER_REL · tr(cov)/d` when the smallest eigenvalue
/// is below `τ`, else `cov`.
fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    if d == 0 {
        return cov.clone();
    }
    let tau = JITTER_REL * (cov.trace().abs() / d as f64).max(f64::MIN_POSITIVE);
    if sorted_eigen(cov).0[d - 1] >= tau {
        return cov.clone();
    }
    log::debug!("evidence covariance floored with jitter {tau:e}");
    cov + DMatrix::identity(d, d) * tau
}

impl DatasetEvidence {
    /// Checks that `λ̂` has a unit-norm mode-shape part and `cov` is PSD.
    pub fn new(dataset_id: impl Into<String>, lambda_hat: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = lambda_hat.len();
        if d < 3 {
            return Err(Error::Dimension(format!("λ̂ needs at least 3 entries, got {d}")));
        }
        if cov.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "λ̂ has length {d}, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if lambda_hat.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite evidence".into()));
        }
        let norm = lambda_hat.rows(2, d - 2).norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("mode shape has norm {norm}, expected 1")));
        }
        let cov = symmetrize(&cov);
        if !is_psd(&cov) {
            return Err(Error::NotPositiveDefinite("evidence covariance".into()));
        }
        Ok(DatasetEvidence {
            dataset_id: dataset_id.into(),
            lambda_hat,
            regularized: regularize(&cov),
            cov,
        })
    }

    /// Skips the unit-norm check; used for toy evidences in tests and for
    /// scalar hyper-models.
    pub fn unconstrained(dataset_id: impl Into<String>, lambda_hat: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = lambda_hat.len();
        if cov.shape() != (d, d) {
            return Err(Error::Dimension(format!("λ̂ has length {d}, covariance is {}x{}", cov.nrows(), cov.ncols())));
        }
        let cov = symmetrize(&cov);
        if !is_psd(&cov) {
            return Err(Error::NotPositiveDefinite("evidence covariance".into()));
        }
        Ok(DatasetEvidence {
            dataset_id: dataset_id.into(),
            lambda_hat,
            regularized: regularize(&cov),
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda_hat.len()
    }

    pub fn lambda_hat(&self) -> &DVector<f64> {
        &self.lambda_hat
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Covariance used inside the hierarchical likelihood: `cov` floored so
    /// that `Σ + Σ̂` stays invertible at `Σ = 0` (the φ-block is singular
    /// along `φ̂`).
    pub fn cov_regularized(&self) -> &DMatrix<f64> {
        &self.regularized
    }

    pub fn phi(&self) -> DVector<f64> {
        self.lambda_hat.rows(2, self.dim() - 2).into_owned()
    }

    /// `λ̂ ↦ Pλ̂`, `Σ̂ ↦ PΣ̂P` for diagonal `P = diag(1, 1, −1, …, −1)`.
    pub fn flipped(&self) -> DatasetEvidence {
        let d = self.dim();
        let sign = |i: usize| if i < 2 { 1.0 } else { -1.0 };
        let cov = DMatrix::from_fn(d, d, |i, j| sign(i) * sign(j) * self.cov[(i, j)]);
        DatasetEvidence {
            dataset_id: self.dataset_id.clone(),
            lambda_hat: DVector::from_fn(d, |i, _| sign(i) * self.lambda_hat[i]),
            regularized: regularize(&cov),
            cov,
        }
    }
}
