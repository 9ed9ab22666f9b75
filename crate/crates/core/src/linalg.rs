//! Small dense linear-algebra helpers shared by the numerical modules.
//!
//! Everything here works on `nalgebra` dynamic matrices. Symmetric results
//! are explicitly symmetrized after construction so downstream PSD checks do
//! not trip over round-off asymmetry.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added to a covariance diagonal when its Cholesky fails.
pub const JITTER_REL: f64 = 1e-10;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Eigenvalue admission threshold for PSD checks, relative to `trace / d`.
pub const PSD_TOL_REL: f64 = 1e-10;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn is_symmetric_exact(a: &DMatrix<f64>) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| a[(i, j)] == a[(j, i)]))
}

/// PSD check with the tolerance `λ_min ≥ −1e-10 · trace / d`.
pub fn is_psd(a: &DMatrix<f64>) -> bool {
    if !a.is_square() || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let d = a.nrows();
    if d == 0 {
        return true;
    }
    let tol = PSD_TOL_REL * (a.trace().abs() / d as f64);
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().all(|&l| l >= -tol)
}

/// Cholesky factorization, erroring with `context` when `a` is not PD.
pub fn cholesky(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone()).ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))
}

/// Cholesky factorization that retries once with `1e-10 · trace / d` added
/// to the diagonal. Used for covariance sums that may carry a structural
/// null direction (the mode-shape norm constraint).
pub fn cholesky_jittered(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let d = a.nrows();
    let scale = (a.trace().abs() / d.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut jittered = a.clone();
    for i in 0..d {
        jittered[(i, i)] += JITTER_REL * scale;
    }
    log::debug!("{context}: Cholesky failed, retrying with jitter {:e}", JITTER_REL * scale);
    Cholesky::new(jittered).ok_or_else(|| Error::Singular(context.to_string()))
}

/// `ln |A|` from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Symmetric inverse from a Cholesky factor.
pub fn chol_inverse(c: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    symmetrize(&c.inverse())
}

/// Eigen-decomposition with eigenvalues sorted in descending order.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let d = a.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Flip `v` so that its largest-magnitude entry is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Symmetric PSD square root via eigen-decomposition, negative eigenvalues
/// clipped to zero. Works for singular covariances where Cholesky does not.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let d = a.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..d {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[(i, j)] *= s;
        }
    }
    scaled * eig.eigenvectors.transpose()
}

/// Clip negative eigenvalues to zero and rebuild the matrix.
pub fn clip_negative_eigenvalues(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// Orthonormal basis (n × (n−1)) of the complement of unit vector `v`,
/// built from the Householder reflection that maps `v` to `±e₁`.
pub fn orthogonal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = v.clone();
    w[0] += sign;
    let wn2 = w.norm_squared();
    let h = if wn2 > 0.0 {
        DMatrix::identity(n, n) - (&w * w.transpose()) * (2.0 / wn2)
    } else {
        DMatrix::identity(n, n)
    };
    h.columns(1, n - 1).into_owned()
}

/// Row-major flattening.
pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_orthonormal() {
        for v in [
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![-0.6, 0.8, 0.0]),
            DVector::from_vec(vec![0.5, -0.5, 0.5, -0.5]),
        ] {
            let t = orthogonal_complement(&v);
            let gram = t.transpose() * &t;
            assert!((gram - DMatrix::identity(v.len() - 1, v.len() - 1)).norm() < 1e-14);
            assert!((t.transpose() * &v).norm() < 1e-14);
        }
    }

    #[test]
    fn jitter_rescues_rank_deficient() {
        let v = DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt();
        let a = &v * v.transpose();
        assert!(cholesky(&a, "x").is_err() || a.determinant().abs() < 1e-15);
        assert!(cholesky_jittered(&a, "x").is_ok());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let s = psd_sqrt(&a);
        assert!((&s * &s - a).norm() < 1e-12);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_psd(&a));
        assert!(is_psd(&clip_negative_eigenvalues(&a)));
    }
}
