//! Exact Gaussian identities: products of densities sharing a variable,
//! their convolution, gain matrices, and structured covariance assembly.
//!
//! Densities are evaluated in log space; [`Gaussian::pdf`] is a thin wrapper.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, chol_logdet, cholesky, symmetrize, LN_2PI};


/// Multivariate normal `N(mean, cov)` with a symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing `cov` and checking it is PSD.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mean".into()));
        }
        let cov = symmetrize(&cov);
        if !linalg::is_psd(&cov) {
            return Err(Error::NotPositiveDefinite("Gaussian covariance".into()));
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Marginal standard deviations.
    pub fn sd(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// `ln N(x | mean, cov)`. Fails for a singular covariance.
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has length {}, Gaussian has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let chol = cholesky(&self.cov, "Gaussian covariance")?;
        let r = x - &self.mean;
        let z = chol.solve(&r);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + chol_logdet(&chol) + r.dot(&z)))
    }

    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64> {
        self.log_pdf(x).map(f64::exp)
    }

    /// Marginal over the listed coordinates (block selection).
    pub fn marginal(&self, indices: &[usize]) -> Result<Gaussian> {
        if indices.iter().any(|&i| i >= self.dim()) {
            return Err(Error::Dimension("marginal index out of range".into()));
        }
        let k = indices.len();
        let mean = DVector::from_iterator(k, indices.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(k, k, |a, b| self.cov[(indices[a], indices[b])]);
        Ok(Gaussian { mean, cov })
    }

    /// One draw using the symmetric PSD square root (valid for singular covariances).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let root = linalg::psd_sqrt(&self.cov);
        self.sample_with_root(&root, rng)
    }

    /// Draw using a precomputed square root `root` with `root·rootᵀ = cov`.
    pub fn sample_with_root<R: Rng + ?Sized>(&self, root: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + root * z
    }

    pub(crate) fn from_parts_unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Gaussian {
            mean,
            cov: symmetrize(&cov),
        }
    }
}

/// Result of factorizing `N(x|μ₀,Σ₀)·N(x|μ,Σ) = N(μ|μ₀,Σ₀+Σ)·N(x|ζ,Ω)`.
#[derive(Debug, Clone)]
pub struct Factorization {
    /// `N(· | μ₀, Σ₀+Σ)`: as a function of `μ`, the evidence term.
    pub evidence: Gaussian,
    /// `ln N(μ | μ₀, Σ₀+Σ)` at the second factor's mean.
    pub log_evidence: f64,
    /// `N(x | ζ, Ω)`.
    pub posterior: Gaussian,
    /// `K = Σ₀(Σ₀+Σ)⁻¹`.
    pub gain: DMatrix<f64>,
}

/// Gain matrix `K = Σ₀ (Σ₀ + Σ)⁻¹`, computed with a Cholesky solve.
pub fn gain_matrix(sigma0: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sum = symmetrize(&(sigma0 + sigma));
    let chol = linalg::cholesky_jittered(&sum, "Σ₀ + Σ")?;
    // K = Σ₀ A⁻¹  ⇔  Kᵀ = A⁻¹ Σ₀ (A, Σ₀ symmetric)
    Ok(chol.solve(sigma0).transpose())
}

/// `Ω = Σ₀ − KΣ₀` in the Joseph form `(I−K)Σ₀(I−K)ᵀ + KΣKᵀ`, which stays
/// positive semi-definite when `Σ₀` or `Σ` is singular.
pub fn gain_posterior_cov(sigma0: &DMatrix<f64>, sigma: &DMatrix<f64>, gain: &DMatrix<f64>) -> DMatrix<f64> {
    let d = sigma0.nrows();
    let r = DMatrix::identity(d, d) - gain;
    symmetrize(&(&r * sigma0 * r.transpose() + gain * sigma * gain.transpose()))
}

/// Product of two Gaussian densities over a shared variable, split into an
/// evidence term over the means and a normalized posterior.
///
/// Posterior uses the gain form `ζ = μ₀ + K(μ − μ₀)`, `Ω = Σ₀ − KΣ₀`.
pub fn product_factorize(g0: &Gaussian, g: &Gaussian) -> Result<Factorization> {
    if g0.dim() != g.dim() {
        return Err(Error::Dimension(format!("{} vs {}", g0.dim(), g.dim())));
    }
    let sum = symmetrize(&(&g0.cov + &g.cov));
    let chol = cholesky(&sum, "Σ₀ + Σ is singular")
        .map_err(|_| Error::Singular("Σ₀ + Σ is singular (degenerate evidence)".into()))?;
    let gain = chol.solve(&g0.cov).transpose();
    let zeta = &g0.mean + &gain * (&g.mean - &g0.mean);
    let omega = gain_posterior_cov(&g0.cov, &g.cov, &gain);
    let evidence = Gaussian::from_parts_unchecked(g0.mean.clone(), sum);
    let r = &g.mean - &g0.mean;
    let log_evidence = -0.5 * (g.dim() as f64 * LN_2PI + chol_logdet(&chol) + r.dot(&chol.solve(&r)));
    Ok(Factorization {
        evidence,
        log_evidence,
        posterior: Gaussian::from_parts_unchecked(zeta, omega),
        gain,
    })
}

/// `ln N(μ | λ̂, Σ + Σ̂)`: the integral `∫ N(λ|λ̂,Σ̂) N(λ|μ,Σ) dλ` in log space.
pub fn log_convolve_evidence(
    lambda_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    sigma_hyper: &DMatrix<f64>,
    mu_hyper: &DVector<f64>,
) -> Result<f64> {
    let d = lambda_hat.len();
    if sigma_hat.shape() != (d, d) || sigma_hyper.shape() != (d, d) || mu_hyper.len() != d {
        return Err(Error::Dimension("convolve_evidence operands are not conformable".into()));
    }
    let sum = symmetrize(&(sigma_hyper + sigma_hat));
    let chol = cholesky(&sum, "Σ + Σ̂")
        .map_err(|_| Error::Singular("Σ + Σ̂ is singular".into()))?;
    let r = mu_hyper - lambda_hat;
    Ok(-0.5 * (d as f64 * LN_2PI + chol_logdet(&chol) + r.dot(&chol.solve(&r))))
}

pub fn convolve_evidence(
    lambda_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    sigma_hyper: &DMatrix<f64>,
    mu_hyper: &DVector<f64>,
) -> Result<f64> {
    log_convolve_evidence(lambda_hat, sigma_hat, sigma_hyper, mu_hyper).map(f64::exp)
}

/// Standard deviations plus strictly-lower-triangular correlations
/// (row-major: `ρ₁₀, ρ₂₀, ρ₂₁, ρ₃₀, …`).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSpec {
    sigmas: Vec<f64>,
    rhos: Vec<f64>,
}

impl CorrelationSpec {
    pub fn new(sigmas: Vec<f64>, rhos: Vec<f64>) -> Result<Self> {
        let d = sigmas.len();
        if rhos.len() != d * d.saturating_sub(1) / 2 {
            return Err(Error::Dimension(format!(
                "{d} standard deviations need {} correlations, got {}",
                d * d.saturating_sub(1) / 2,
                rhos.len()
            )));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidInput("standard deviations must be finite and ≥ 0".into()));
        }
        if rhos.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::InvalidInput("correlations must lie in (−1, 1)".into()));
        }
        Ok(CorrelationSpec { sigmas, rhos })
    }

    pub fn dim(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    /// `ρ_ij` for any pair (1 on the diagonal).
    pub fn rho(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let (r, c) = if i > j { (i, j) } else { (j, i) };
        self.rhos[r * (r - 1) / 2 + c]
    }

    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.rho(i, j))
    }
}

/// Cholesky factor of the correlation matrix written in the closed form of
/// nested Schur complements: column `i` of row `j` is
/// `(ρ_ij − ρ_iᵀ R_{i−1}⁻¹ ρ_i^{*j}) / √(1 − ρ_iᵀ R_{i−1}⁻¹ ρ_i)` and the
/// diagonal is `√(1 − ρ_jᵀ R_{j−1}⁻¹ ρ_j)`, where `R_k` is the leading k×k
/// block and `ρ_i^{*j} = (ρ_{1j}, …, ρ_{(i−1)j})`.
pub fn cholesky_from_correlation(spec: &CorrelationSpec) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    let mut l = DMatrix::<f64>::zeros(d, d);
    if d == 0 {
        return Ok(l);
    }
    // schur[i] = 1 − ρ_iᵀ R_{i−1}⁻¹ ρ_i; solves[i] = R_{i−1}⁻¹ ρ_i
    let mut schur = vec![1.0; d];
    let mut solves: Vec<DVector<f64>> = vec![DVector::zeros(0); d];
    for i in 1..d {
        let rho_i = DVector::from_iterator(i, (0..i).map(|k| spec.rho(k, i)));
        let r_prev = DMatrix::from_fn(i, i, |a, b| spec.rho(a, b));
        let chol = cholesky(&r_prev, "leading correlation block")?;
        let s = chol.solve(&rho_i);
        let q = 1.0 - rho_i.dot(&s);
        if !(q > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "correlation matrix: Schur complement {q:e} at index {i}"
            )));
        }
        schur[i] = q;
        solves[i] = s;
    }
    for j in 0..d {
        l[(j, 0)] = spec.rho(0, j);
        for i in 1..j {
            let rho_star = DVector::from_iterator(i, (0..i).map(|k| spec.rho(k, j)));
            l[(j, i)] = (spec.rho(i, j) - rho_star.dot(&solves[i])) / schur[i].sqrt();
        }
        if j > 0 {
            l[(j, j)] = schur[j].sqrt();
        }
    }
    l[(0, 0)] = 1.0;
    Ok(l)
}

/// `Σ = S L Lᵀ S` with `S = diag(σ)`: diagonal σ², off-diagonal ρσσ.
pub fn assemble_covariance(spec: &CorrelationSpec) -> Result<DMatrix<f64>> {
    let l = cholesky_from_correlation(spec)?;
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(spec.sigmas()));
    let sl = &s * l;
    Ok(symmetrize(&(&sl * sl.transpose())))
}
