//! Finite-difference derivatives, damped Newton steps and Laplace covariances.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Central-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Symmetrized central finite-difference Jacobian of a gradient field.
pub fn fd_hessian<G: Fn(&DVector<f64>) -> DVector<f64>>(grad: G, x: &DVector<f64>) -> DMatrix<f64> {
    fd_hessian_with(grad, x, fd_step)
}

pub fn fd_hessian_with<G, S>(grad: G, x: &DVector<f64>, step: S) -> DMatrix<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
    S: Fn(f64) -> f64,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        let s = step(x[j]);
        xp[j] = x[j] + s;
        let gp = grad(&xp);
        xp[j] = x[j] - s;
        let gm = grad(&xp);
        xp[j] = x[j];
        h.set_column(j, &((gp - gm) / (2.0 * s)));
    }
    symmetrize(&h)
}

/// Second-order central differences of the objective itself. Independent of
/// any gradient code; used to cross-check Hessians.
pub fn fd_hessian_of_value<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let steps: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut xp = x.clone();
    for i in 0..n {
        for j in i..n {
            let (hi, hj) = (steps[i], steps[j]);
            let val = if i == j {
                xp[i] = x[i] + hi;
                let fp = f(&xp);
                xp[i] = x[i] - hi;
                let fm = f(&xp);
                xp[i] = x[i];
                (fp - 2.0 * f0 + fm) / (hi * hi)
            } else {
                let mut eval = |si: f64, sj: f64| {
                    xp[i] = x[i] + si * hi;
                    xp[j] = x[j] + sj * hj;
                    let v = f(&xp);
                    xp[i] = x[i];
                    xp[j] = x[j];
                    v
                };
                (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj)
            };
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    h
}

/// Solve `(H + μ·diag(H)) p = −g` with Marquardt damping `μ ≥ 0`, raising
/// `μ` until the damped matrix is positive definite. Returns the step and the
/// damping used.
pub fn damped_newton_step(h: &DMatrix<f64>, g: &DVector<f64>, mut damping: f64) -> Option<(DVector<f64>, f64)> {
    let n = g.len();
    if n == 0 {
        return Some((DVector::zeros(0), damping));
    }
    let scale: Vec<f64> = (0..n)
        .map(|i| h[(i, i)].abs().max(1e-12 * h.amax().max(1e-300)))
        .collect();
    for _ in 0..60 {
        let mut m = h.clone();
        for i in 0..n {
            m[(i, i)] += damping * scale[i];
        }
        if let Some(c) = Cholesky::new(m) {
            let p = -c.solve(g);
            if p.iter().all(|v| v.is_finite()) {
                return Some((p, damping));
            }
        }
        damping = if damping == 0.0 { 1e-8 } else { damping * 10.0 };
        if damping > 1e20 {
            break;
        }
    }
    None
}

/// Inverse of a symmetric Hessian, or the most negative eigenpair when it
/// is not positive definite.
pub fn laplace_inverse(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let hs = symmetrize(h);
    let n = hs.nrows();
    // Jacobi scaling so the definiteness test is insensitive to parameter units.
    let diag = hs.diagonal();
    let scale = DVector::from_fn(n, |i, _| if diag[i] > 0.0 && diag[i].is_finite() { diag[i].sqrt().recip() } else { 1.0 });
    let scaled = DMatrix::from_fn(n, n, |i, j| hs[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled.clone());
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let indefinite = || {
        let v = eig.eigenvectors.column(imin).component_mul(&scale);
        let v = v.normalize();
        let curvature = (v.transpose() * &hs * &v)[(0, 0)];
        Error::IndefiniteHessian {
            eigenvalue: curvature,
            direction: v.iter().cloned().collect(),
        }
    };
    if diag.iter().any(|&d| !(d > 0.0)) || !lmin.is_finite() || !(lmin > 1e-14 * lmax) {
        return Err(indefinite());
    }
    let chol = Cholesky::new(scaled).ok_or_else(indefinite)?;
    let inv = chol.inverse();
    Ok(symmetrize(&DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * scale[i] * scale[j])))
}

/// Laplace covariance of a density `∝ exp(−L)` at its mode `x_hat`, with
/// the Hessian taken by finite differences of `grad`.
pub fn laplace_covariance<G: Fn(&DVector<f64>) -> DVector<f64>>(grad: G, x_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    laplace_inverse(&fd_hessian(grad, x_hat))
}
