//! Hyper-layer over per-dataset evidences: marginal hyper-likelihood, its
//! derivatives, MAP estimation, Laplace approximation, and the conditional
//! and predictive distributions of the dynamical parameters.
//!
//! Derivatives are directional: for a covariance direction `U`,
//! `dL[U] = tr(G U)` with `G = ½ Σ_s (B_s − w_s w_sᵀ)`, `B_s = (Σ + Σ̂_s)⁻¹`,
//! `w_s = B_s (μ − λ̂_s)`, and
//! `d²L[U, V] = Σ_s (−½ tr(B_s U B_s V) + w_sᵀ U B_s V w_s) + tr(G d²Σ[U, V])`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::evidence::DatasetEvidence;
use crate::gaussian::{gain_matrix, gain_posterior_cov, Gaussian};
use crate::linalg::{self, chol_inverse, chol_logdet, cholesky_jittered, clip_negative_eigenvalues, fix_sign, sorted_eigen, symmetrize};
use crate::optim;

/// Below this many datasets the conditional uses exact leave-one-out fits.
pub const LOO_THRESHOLD: usize = 10;

/// Cosine below which two mode shapes are treated as different modes.
pub const MODE_MISMATCH_COSINE: f64 = 0.2;

/// Hyper-parameters ψ = (μ_λ, Σ_λλ).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl HyperParams {
    pub fn new(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mu.len(), mu.len()) {
            return Err(Error::Dimension(format!(
                "μ has length {}, Σ is {}x{}",
                mu.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        if !linalg::is_psd(&cov) {
            return Err(Error::NotPositiveDefinite("hyper covariance".into()));
        }
        Ok(HyperParams { mu, cov })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `(μ, Σ₀₀, Σ₀₁, …, Σ₀,d−1, Σ₁₁, …)`: mean then upper triangle by rows.
    pub fn packed(&self) -> DVector<f64> {
        let d = self.dim();
        let mut v: Vec<f64> = self.mu.iter().cloned().collect();
        for (p, q) in upper_indices(d) {
            v.push(self.cov[(p, q)]);
        }
        DVector::from_vec(v)
    }

    pub fn from_packed(d: usize, v: &DVector<f64>) -> Result<Self> {
        if v.len() != packed_dim(d) {
            return Err(Error::Dimension(format!("packed ψ has length {}, expected {}", v.len(), packed_dim(d))));
        }
        let mut cov = DMatrix::zeros(d, d);
        for (k, (p, q)) in upper_indices(d).into_iter().enumerate() {
            cov[(p, q)] = v[d + k];
            cov[(q, p)] = v[d + k];
        }
        HyperParams::new(v.rows(0, d).into_owned(), cov)
    }

    /// Norm of the mode-shape part of μ (not renormalized).
    pub fn mu_phi_norm(&self) -> f64 {
        self.mu.rows(2, self.dim().saturating_sub(2)).norm()
    }

    /// Copy with the mode-shape part of μ rescaled to unit norm.
    pub fn with_unit_mu_phi(&self) -> HyperParams {
        let mut out = self.clone();
        let norm = self.mu_phi_norm();
        if norm > 0.0 && self.dim() > 2 {
            let d = self.dim();
            let mut phi = out.mu.rows_mut(2, d - 2);
            phi /= norm;
        }
        out
    }
}

/// Length of the packed ψ vector: `d + d(d+1)/2`, i.e. `(n+2)(n+5)/2` for `d = n+2`.
pub fn packed_dim(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Upper-triangle index pairs `(p, q)`, `p ≤ q`, by rows.
pub fn upper_indices(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|p| (p..d).map(move |q| (p, q))).collect()
}

fn lower_indices(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (0..=a).map(move |b| (a, b))).collect()
}

fn sym_unit(d: usize, p: usize, q: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(d, d);
    u[(p, q)] = 1.0;
    u[(q, p)] = 1.0;
    u
}

/// Flip mode shapes so each has a non-negative inner product with the first.
pub fn align_mode_signs(evidences: &[DatasetEvidence]) -> Result<Vec<DatasetEvidence>> {
    let first = evidences
        .first()
        .ok_or_else(|| Error::InvalidInput("no evidences to align".into()))?;
    check_dims(evidences)?;
    let reference = first.phi();
    evidences
        .iter()
        .map(|ev| {
            let cosine = ev.phi().dot(&reference);
            if cosine.abs() < MODE_MISMATCH_COSINE {
                return Err(Error::ModeMismatch {
                    dataset: ev.dataset_id.clone(),
                    cosine: cosine.abs(),
                });
            }
            Ok(if cosine < 0.0 { ev.flipped() } else { ev.clone() })
        })
        .collect()
}

fn check_dims(evidences: &[DatasetEvidence]) -> Result<usize> {
    let d = evidences
        .first()
        .ok_or_else(|| Error::InvalidInput("no evidences".into()))?
        .dim();
    for ev in evidences {
        if ev.dim() != d {
            return Err(Error::Dimension(format!(
                "evidence {} has dimension {}, expected {d}",
                ev.dataset_id,
                ev.dim()
            )));
        }
    }
    Ok(d)
}

/// Evidences sorted by `λ̂` then covariance, so results do not depend on
/// input order.
pub fn canonical_order(evidences: &[DatasetEvidence]) -> Vec<DatasetEvidence> {
    let mut out = evidences.to_vec();
    out.sort_by(|a, b| {
        let key = |e: &DatasetEvidence| e.lambda_hat().iter().chain(e.cov().iter()).cloned().collect::<Vec<f64>>();
        let (ka, kb) = (key(a), key(b));
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

struct Term {
    logdet: f64,
    quad: f64,
    b: DMatrix<f64>,
    w: DVector<f64>,
}

fn terms(mu: &DVector<f64>, sigma: &DMatrix<f64>, evidences: &[DatasetEvidence]) -> Result<Vec<Term>> {
    let d = check_dims(evidences)?;
    if mu.len() != d || sigma.shape() != (d, d) {
        return Err(Error::Dimension(format!("ψ has dimension {}, evidences {d}", mu.len())));
    }
    evidences
        .iter()
        .map(|ev| {
            let a = symmetrize(&(sigma + ev.cov_regularized()));
            let chol = cholesky_jittered(&a, &format!("Σ + Σ̂ for {}", ev.dataset_id))?;
            let r = mu - ev.lambda_hat();
            let w = chol.solve(&r);
            Ok(Term {
                logdet: chol_logdet(&chol),
                quad: r.dot(&w),
                b: chol_inverse(&chol),
                w,
            })
        })
        .collect()
}

fn value_of(terms: &[Term]) -> f64 {
    terms.iter().map(|t| 0.5 * (t.logdet + t.quad)).sum()
}

/// `½ Σ_s ln|Σ + Σ̂_s| + ½ Σ_s (μ − λ̂_s)ᵀ(Σ + Σ̂_s)⁻¹(μ − λ̂_s)`.
pub fn hyper_nll(psi: &HyperParams, evidences: &[DatasetEvidence]) -> Result<f64> {
    let d = check_dims(evidences)?;
    if psi.dim() != d {
        return Err(Error::Dimension(format!("ψ has dimension {}, evidences {d}", psi.dim())));
    }
    let mut total = 0.0;
    for ev in evidences {
        let chol = cholesky_jittered(&symmetrize(&(&psi.cov + ev.cov_regularized())), "Σ + Σ̂")?;
        let r = &psi.mu - ev.lambda_hat();
        total += 0.5 * (chol_logdet(&chol) + r.dot(&chol.solve(&r)));
    }
    Ok(total)
}

/// Uniform box prior on the hyper-parameters: bounds on μ and on the
/// eigenvalues of Σ.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrior {
    pub mu_lo: DVector<f64>,
    pub mu_hi: DVector<f64>,
    pub var_lo: DVector<f64>,
    pub var_hi: DVector<f64>,
}

impl HyperPrior {
    /// `μ_f ∈ (0, nyquist)`, `μ_ξ ∈ (0, 0.1)`, `μ_φ ∈ (−1, 1)`, eigenvalues in `[0, 0.1]`.
    pub fn default_for(channels: usize, nyquist: f64) -> Self {
        let d = channels + 2;
        let mut mu_lo = DVector::from_element(d, -1.0);
        let mut mu_hi = DVector::from_element(d, 1.0);
        mu_lo[0] = 0.0;
        mu_hi[0] = nyquist;
        mu_lo[1] = 0.0;
        mu_hi[1] = 0.1;
        HyperPrior {
            mu_lo,
            mu_hi,
            var_lo: DVector::zeros(d),
            var_hi: DVector::from_element(d, 0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_lo.len()
    }

    pub fn contains_mu(&self, mu: &DVector<f64>) -> bool {
        mu.len() == self.dim() && (0..self.dim()).all(|i| self.mu_lo[i] < mu[i] && mu[i] < self.mu_hi[i])
    }

    /// Sorted-descending eigenvalues checked against the bounds in order.
    pub fn contains_eigenvalues(&self, values: &DVector<f64>) -> bool {
        values.len() == self.dim() && (0..self.dim()).all(|i| self.var_lo[i] <= values[i] && values[i] <= self.var_hi[i])
    }
}

/// Hyper-NLL plus the box prior: `+∞` outside.
pub fn hyper_nll_with_prior(psi: &HyperParams, evidences: &[DatasetEvidence], prior: &HyperPrior) -> Result<f64> {
    if !prior.contains_mu(&psi.mu) || !prior.contains_eigenvalues(&sorted_eigen(&psi.cov).0) {
        return Ok(f64::INFINITY);
    }
    hyper_nll(psi, evidences)
}

/// Gradient with respect to μ and to Σ treated as an unconstrained matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradient {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

pub fn hyper_gradient(psi: &HyperParams, evidences: &[DatasetEvidence]) -> Result<HyperGradient> {
    let ts = terms(&psi.mu, &psi.cov, evidences)?;
    Ok(gradient_of(&ts, psi.dim()))
}

fn gradient_of(ts: &[Term], d: usize) -> HyperGradient {
    let mut mu = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, d);
    for t in ts {
        mu += &t.w;
        sigma += (&t.b - &t.w * t.w.transpose()) * 0.5;
    }
    HyperGradient {
        mu,
        sigma: symmetrize(&sigma),
    }
}

/// Joint derivatives over `(μ, θ)` for covariance directions `dirs`.
struct Derivatives {
    value: f64,
    g: DMatrix<f64>,
    grad_theta: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn derivatives(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    evidences: &[DatasetEvidence],
    dirs: &[DMatrix<f64>],
) -> Result<Derivatives> {
    let d = mu.len();
    let m = dirs.len();
    let ts = terms(mu, sigma, evidences)?;
    let grad = gradient_of(&ts, d);
    let grad_theta = DVector::from_iterator(m, dirs.iter().map(|u| (&grad.sigma * u).trace()));
    let mut h = DMatrix::zeros(d + m, d + m);
    for t in &ts {
        let bu: Vec<DMatrix<f64>> = dirs.iter().map(|u| &t.b * u).collect();
        let uw: Vec<DVector<f64>> = dirs.iter().map(|u| u * &t.w).collect();
        let buw: Vec<DVector<f64>> = uw.iter().map(|v| &t.b * v).collect();
        {
            let mut hmm = h.view_mut((0, 0), (d, d));
            hmm += &t.b;
        }
        for i in 0..m {
            for r in 0..d {
                h[(r, d + i)] -= buw[i][r];
            }
            for j in i..m {
                let tr = bu[i].component_mul(&bu[j].transpose()).sum();
                h[(d + i, d + j)] += -0.5 * tr + uw[i].dot(&buw[j]);
            }
        }
    }
    for i in 0..d + m {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
    }
    Ok(Derivatives {
        value: value_of(&ts),
        g: grad.sigma,
        grad_theta,
        hessian: h,
    })
}

fn packed_dirs(d: usize) -> Vec<DMatrix<f64>> {
    upper_indices(d).into_iter().map(|(p, q)| sym_unit(d, p, q)).collect()
}

/// Gradient over the packed ψ (off-diagonal Σ entries move in pairs).
pub fn hyper_gradient_packed(psi: &HyperParams, evidences: &[DatasetEvidence]) -> Result<DVector<f64>> {
    let grad = hyper_gradient(psi, evidences)?;
    let d = psi.dim();
    let mut v: Vec<f64> = grad.mu.iter().cloned().collect();
    for (p, q) in upper_indices(d) {
        v.push(if p == q { grad.sigma[(p, p)] } else { 2.0 * grad.sigma[(p, q)] });
    }
    Ok(DVector::from_vec(v))
}

/// Hessian over the packed ψ.
pub fn hyper_hessian(psi: &HyperParams, evidences: &[DatasetEvidence]) -> Result<DMatrix<f64>> {
    Ok(derivatives(&psi.mu, &psi.cov, evidences, &packed_dirs(psi.dim()))?.hessian)
}

/// Hessian over `(μ, chart eigenvalues)`.
pub fn hyper_hessian_chart(mu: &DVector<f64>, chart: &EigenbasisChart, eigenvalues: &DVector<f64>, evidences: &[DatasetEvidence]) -> Result<DMatrix<f64>> {
    let sigma = chart.assemble(eigenvalues);
    Ok(derivatives(mu, &sigma, evidences, &chart.directions())?.hessian)
}

/// Weights `Λ_s = (Σ_r B_r)⁻¹ B_s` and `μ* = Σ_s Λ_s λ̂_s`.
pub fn mu_weights(sigma: &DMatrix<f64>, evidences: &[DatasetEvidence]) -> Result<(Vec<DMatrix<f64>>, DVector<f64>)> {
    let d = check_dims(evidences)?;
    let ts = terms(&DVector::zeros(d), sigma, evidences)?;
    let mut total = DMatrix::zeros(d, d);
    for t in &ts {
        total += &t.b;
    }
    let chol = cholesky_jittered(&symmetrize(&total), "Σ_s (Σ + Σ̂_s)⁻¹")?;
    let weights: Vec<DMatrix<f64>> = ts.iter().map(|t| chol.solve(&t.b)).collect();
    let mut mu = DVector::zeros(d);
    for (w, ev) in weights.iter().zip(evidences) {
        mu += w * ev.lambda_hat();
    }
    Ok((weights, mu))
}

/// Closed-form minimizer over μ for fixed Σ.
pub fn optimal_mu(sigma: &DMatrix<f64>, evidences: &[DatasetEvidence]) -> Result<DVector<f64>> {
    let d = check_dims(evidences)?;
    let ts = terms(&DVector::zeros(d), sigma, evidences)?;
    // Solved as a correction to the plain average: Σ_s B_s can be badly
    // conditioned, and this way the lost digits are those of the residuals.
    let mean = evidences.iter().fold(DVector::zeros(d), |a, ev| a + ev.lambda_hat()) / evidences.len() as f64;
    let mut total = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (t, ev) in ts.iter().zip(evidences) {
        total += &t.b;
        rhs += &t.b * (ev.lambda_hat() - &mean);
    }
    let chol = cholesky_jittered(&symmetrize(&total), "Σ_s (Σ + Σ̂_s)⁻¹")?;
    Ok(mean + chol.solve(&rhs))
}

/// Ensemble mean, and ensemble scatter minus the mean evidence covariance
/// with negative eigenvalues clipped.
pub fn initial_hyper(evidences: &[DatasetEvidence]) -> Result<HyperParams> {
    let d = check_dims(evidences)?;
    let nd = evidences.len();
    if nd < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 evidences, got {nd}")));
    }
    let evs = canonical_order(evidences);
    let mut mean = DVector::zeros(d);
    for ev in &evs {
        mean += ev.lambda_hat();
    }
    mean /= nd as f64;
    let mut scatter = DMatrix::zeros(d, d);
    for ev in &evs {
        let r = &mean - ev.lambda_hat();
        scatter += &r * r.transpose();
        scatter -= ev.cov();
    }
    scatter /= nd as f64;
    HyperParams::new(mean, clip_negative_eigenvalues(&symmetrize(&scatter)))
}

/// Mean of the evidence covariances.
pub fn mean_evidence_cov(evidences: &[DatasetEvidence]) -> Result<DMatrix<f64>> {
    let d = check_dims(evidences)?;
    let mut total = DMatrix::zeros(d, d);
    for ev in evidences {
        total += ev.cov();
    }
    Ok(total / evidences.len() as f64)
}

/// Fixed eigenvectors with free non-negative eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenbasisChart {
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

impl EigenbasisChart {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `basis · diag(d) · basisᵀ`.
    pub fn assemble(&self, eigenvalues: &DVector<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.basis[(i, j)] * eigenvalues[j]);
        symmetrize(&(scaled * self.basis.transpose()))
    }

    /// `q_k q_kᵀ` for each basis column.
    pub fn directions(&self) -> Vec<DMatrix<f64>> {
        (0..self.dim())
            .map(|k| {
                let q = self.basis.column(k);
                q * q.transpose()
            })
            .collect()
    }

    /// Chart eigenvalues of an arbitrary Σ: `diag(basisᵀ Σ basis)`.
    pub fn project(&self, sigma: &DMatrix<f64>) -> DVector<f64> {
        (self.basis.transpose() * sigma * &self.basis).diagonal()
    }

    /// Free parameters: mean plus eigenvalues.
    pub fn unknowns(&self) -> usize {
        2 * self.dim()
    }
}

/// Eigenvectors of `Σ̄`, eigenvalues descending, each column's
/// largest-magnitude entry positive.
pub fn eigenbasis_reduce(sigma_bar: &DMatrix<f64>) -> EigenbasisChart {
    let (values, mut vectors) = sorted_eigen(sigma_bar);
    for j in 0..vectors.ncols() {
        let mut c = vectors.column(j).into_owned();
        fix_sign(&mut c);
        vectors.set_column(j, &c);
    }
    EigenbasisChart {
        basis: vectors,
        eigenvalues: values.map(|v| v.max(0.0)),
    }
}

/// Stopping rules for [`map_estimate_with`].
#[derive(Debug, Clone)]
pub struct MapOptions {
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub step_tol: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            max_iterations: 1000,
            rel_tol: 1e-10,
            step_tol: 1e-8,
        }
    }
}

/// MAP estimate of ψ and its diagnostics.
#[derive(Debug, Clone)]
pub struct HyperFit {
    pub psi: HyperParams,
    /// Chart used, with the fitted eigenvalues.
    pub chart: Option<EigenbasisChart>,
    /// Σ̂ sits on the zero boundary: no detectable across-dataset variability.
    pub no_variability: bool,
    pub nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Covariance coordinates used by the profile optimizer.
trait CovCoords {
    fn sigma(&self, c: &DVector<f64>) -> DMatrix<f64>;
    fn directions(&self, c: &DVector<f64>) -> Vec<DMatrix<f64>>;
    /// Adds `tr(G d²Σ)` to the coordinate Hessian.
    fn add_curvature(&self, _g: &DMatrix<f64>, _h: &mut DMatrix<f64>) {}
    fn nonnegative(&self) -> bool;
}

struct ChartCoords<'a>(&'a EigenbasisChart);

impl CovCoords for ChartCoords<'_> {
    fn sigma(&self, c: &DVector<f64>) -> DMatrix<f64> {
        self.0.assemble(c)
    }

    fn directions(&self, _c: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.0.directions()
    }

    fn nonnegative(&self) -> bool {
        true
    }
}

/// Σ = LLᵀ over the lower-triangle entries of L.
struct CholeskyCoords {
    d: usize,
    idx: Vec<(usize, usize)>,
}

impl CholeskyCoords {
    fn new(d: usize) -> Self {
        CholeskyCoords { d, idx: lower_indices(d) }
    }

    fn factor(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.d, self.d);
        for (k, &(a, b)) in self.idx.iter().enumerate() {
            l[(a, b)] = c[k];
        }
        l
    }

    fn encode(&self, l: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.idx.len(), self.idx.iter().map(|&(a, b)| l[(a, b)]))
    }
}

impl CovCoords for CholeskyCoords {
    fn sigma(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let l = self.factor(c);
        symmetrize(&(&l * l.transpose()))
    }

    fn directions(&self, c: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let l = self.factor(c);
        self.idx
            .iter()
            .map(|&(a, b)| {
                // E_ab Lᵀ + L E_ba
                let mut u = DMatrix::zeros(self.d, self.d);
                for j in 0..self.d {
                    u[(a, j)] += l[(j, b)];
                    u[(j, a)] += l[(j, b)];
                }
                u
            })
            .collect()
    }

    fn add_curvature(&self, g: &DMatrix<f64>, h: &mut DMatrix<f64>) {
        // d²Σ[E_ab, E_ce] = δ_be (E_ac + E_ca)
        for (i, &(a, b)) in self.idx.iter().enumerate() {
            for (j, &(c, e)) in self.idx.iter().enumerate() {
                if b == e {
                    h[(i, j)] += 2.0 * g[(a, c)];
                }
            }
        }
    }

    fn nonnegative(&self) -> bool {
        false
    }
}

struct Profile {
    value: f64,
    mu: DVector<f64>,
    grad: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn profile_value(coords: &dyn CovCoords, c: &DVector<f64>, evidences: &[DatasetEvidence]) -> Result<(f64, DVector<f64>)> {
    let sigma = coords.sigma(c);
    let mu = optimal_mu(&sigma, evidences)?;
    let v = value_of(&terms(&mu, &sigma, evidences)?);
    Ok((v, mu))
}

fn profile(coords: &dyn CovCoords, c: &DVector<f64>, evidences: &[DatasetEvidence]) -> Result<Profile> {
    let sigma = coords.sigma(c);
    let mu = optimal_mu(&sigma, evidences)?;
    let dirs = coords.directions(c);
    let der = derivatives(&mu, &sigma, evidences, &dirs)?;
    let d = mu.len();
    let m = dirs.len();
    let h_mm = der.hessian.view((0, 0), (d, d)).into_owned();
    let h_mt = der.hessian.view((0, d), (d, m)).into_owned();
    let mut h_tt = der.hessian.view((d, d), (m, m)).into_owned();
    coords.add_curvature(&der.g, &mut h_tt);
    let chol = cholesky_jittered(&h_mm, "Σ_s B_s")?;
    let schur = symmetrize(&(h_tt - h_mt.transpose() * chol.solve(&h_mt)));
    Ok(Profile {
        value: der.value,
        mu,
        grad: der.grad_theta,
        hessian: schur,
    })
}

/// Projected damped Newton on the profile objective `min_μ L(μ, Σ(c))`.
fn profile_newton(
    coords: &dyn CovCoords,
    mut c: DVector<f64>,
    evidences: &[DatasetEvidence],
    opts: &MapOptions,
    scale: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64, usize, bool)> {
    let m = c.len();
    let mut damping = 0.0;
    let mut last_rel = f64::INFINITY;
    let mut last_step = f64::INFINITY;
    for iter in 0..opts.max_iterations {
        let p = profile(coords, &c, evidences)?;
        let free: Vec<usize> = (0..m)
            .filter(|&k| !(coords.nonnegative() && c[k] <= 0.0 && p.grad[k] >= 0.0))
            .collect();
        let g_free = DVector::from_iterator(free.len(), free.iter().map(|&k| p.grad[k]));
        let h_free = DMatrix::from_fn(free.len(), free.len(), |a, b| p.hessian[(free[a], free[b])]);
        let step_scale = opts.step_tol * c.norm().max(scale);
        if free.is_empty() || (last_rel < opts.rel_tol && last_step < step_scale) {
            return Ok((c, p.mu, p.value, iter, true));
        }
        let Some((dir, used)) = optim::damped_newton_step(&h_free, &g_free, damping) else {
            return Ok((c, p.mu, p.value, iter, false));
        };
        damping = used;
        let predicted = (-0.5 * g_free.dot(&dir)).abs() / p.value.abs().max(1.0);
        let full_step = DVector::from_iterator(m, (0..m).map(|k| free.iter().position(|&f| f == k).map_or(0.0, |a| dir[a])));
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = &c + &full_step * t;
            if coords.nonnegative() {
                trial.apply(|v| *v = v.max(0.0));
            }
            let moved = &trial - &c;
            match profile_value(coords, &trial, evidences) {
                Ok((v, _)) if v.is_finite() && v <= p.value + 1e-4 * p.grad.dot(&moved).min(0.0) && v <= p.value => {
                    accepted = Some((trial, v, moved.norm()));
                    break;
                }
                _ => {}
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, v, moved)) => {
                last_rel = (p.value - v) / p.value.abs().max(1.0);
                last_step = moved;
                c = trial;
                if t == 1.0 {
                    damping *= 0.1;
                    if damping < 1e-12 {
                        damping = 0.0;
                    }
                }
            }
            None => {
                if predicted < opts.rel_tol {
                    return Ok((c, p.mu, p.value, iter, true));
                }
                damping = if damping == 0.0 { 1e-4 } else { damping * 10.0 };
                if damping > 1e12 {
                    return Ok((c, p.mu, p.value, iter, false));
                }
            }
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iterations,
        objective: profile_value(coords, &c, evidences)?.0,
    })
}

/// MAP estimate with default options.
pub fn map_estimate(evidences: &[DatasetEvidence], chart: Option<&EigenbasisChart>) -> Result<HyperFit> {
    map_estimate_with(evidences, chart, &MapOptions::default())
}

/// MAP estimate of ψ. The mean is eliminated by its closed form at every
/// evaluation; the covariance is searched by projected Newton over chart
/// eigenvalues (≥ 0) or, without a chart, over a Cholesky factor of Σ.
pub fn map_estimate_with(evidences: &[DatasetEvidence], chart: Option<&EigenbasisChart>, opts: &MapOptions) -> Result<HyperFit> {
    let d = check_dims(evidences)?;
    if evidences.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 evidences, got {}", evidences.len())));
    }
    let evs = canonical_order(evidences);
    let init = initial_hyper(&evs)?;
    let sigma0 = mean_evidence_cov(&evs)?;
    let scale = (sigma0.trace().abs() + init.cov.trace().abs()) / d as f64;
    let zero_tol = 1e-8 * scale.max(f64::MIN_POSITIVE);
    match chart {
        Some(ch) => {
            if ch.dim() != d {
                return Err(Error::Dimension(format!("chart has dimension {}, evidences {d}", ch.dim())));
            }
            let start = ch.eigenvalues.map(|v| v.max(0.0));
            let (values, mu, value, iterations, converged) = profile_newton(&ChartCoords(ch), start, &evs, opts, scale)?;
            let sigma = ch.assemble(&values);
            let no_variability = values.iter().all(|&v| v <= 0.0) || values.iter().all(|&v| v <= zero_tol);
            Ok(HyperFit {
                psi: HyperParams::new(mu, sigma)?,
                chart: Some(EigenbasisChart {
                    basis: ch.basis.clone(),
                    eigenvalues: values,
                }),
                no_variability,
                nll: value,
                iterations,
                converged,
            })
        }
        None => {
            let coords = CholeskyCoords::new(d);
            let eps = 1e-2 * scale.max(f64::MIN_POSITIVE);
            let start_cov = &init.cov + DMatrix::identity(d, d) * eps;
            let l0 = linalg::cholesky(&start_cov, "initial Σ")?.l();
            let (c, mut mu, mut value, mut iterations, converged) = profile_newton(&coords, coords.encode(&l0), &evs, opts, scale.sqrt())?;
            let mut sigma = coords.sigma(&c);
            // Polish over the eigenbasis of the estimate: the Cholesky factor only
            // approaches a rank-deficient Σ, the eigenvalue search can reach it.
            let basis = eigenbasis_reduce(&sigma);
            let start = basis.eigenvalues.clone();
            if let Ok((values, mu_p, value_p, it_p, true)) = profile_newton(&ChartCoords(&basis), start, &evs, opts, scale) {
                if value_p <= value {
                    sigma = basis.assemble(&values);
                    mu = mu_p;
                    value = value_p;
                    iterations += it_p;
                }
            }
            let no_variability = sorted_eigen(&sigma).0[0] <= zero_tol;
            Ok(HyperFit {
                psi: HyperParams::new(mu, sigma)?,
                chart: None,
                no_variability,
                nll: value,
                iterations,
                converged,
            })
        }
    }
}

/// Initial estimate, optional eigenbasis chart, then MAP.
pub fn fit(evidences: &[DatasetEvidence], use_chart: bool) -> Result<HyperFit> {
    if use_chart {
        let init = initial_hyper(evidences)?;
        let chart = eigenbasis_reduce(&init.cov);
        map_estimate(evidences, Some(&chart))
    } else {
        map_estimate(evidences, None)
    }
}

/// `N(λ̂_r + K(μ̂ − λ̂_r), Σ̂_r − KΣ̂_r)`, `K = Σ̂_r(Σ̂_r + Σ̂_λλ)⁻¹`.
pub fn dataset_conditional(r: usize, evidences: &[DatasetEvidence], psi: &HyperParams) -> Result<Gaussian> {
    let ev = evidences
        .get(r)
        .ok_or_else(|| Error::InvalidInput(format!("dataset index {r} out of range")))?;
    conditional_for(ev, psi)
}

pub fn conditional_for(ev: &DatasetEvidence, psi: &HyperParams) -> Result<Gaussian> {
    if ev.dim() != psi.dim() {
        return Err(Error::Dimension(format!("evidence has dimension {}, ψ {}", ev.dim(), psi.dim())));
    }
    let k = gain_matrix(ev.cov(), &psi.cov)?;
    let mean = ev.lambda_hat() + &k * (&psi.mu - ev.lambda_hat());
    let cov = gain_posterior_cov(ev.cov(), &psi.cov, &k);
    if linalg::is_psd(&cov) {
        return Gaussian::new(mean, cov);
    }
    let tol = linalg::PSD_TOL_REL * ev.cov().trace().abs() / ev.dim() as f64;
    if sorted_eigen(&cov).0.min() >= -tol {
        return Gaussian::new(mean, clip_negative_eigenvalues(&cov));
    }
    Err(Error::NotPositiveDefinite(format!("conditional covariance for {}", ev.dataset_id)))
}

/// Conditionals for every dataset. Below [`LOO_THRESHOLD`] datasets, each
/// uses a MAP fitted without that dataset.
pub fn conditionals(evidences: &[DatasetEvidence], full: &HyperFit, use_chart: bool) -> Result<Vec<Gaussian>> {
    let nd = evidences.len();
    (0..nd)
        .map(|r| {
            if nd >= LOO_THRESHOLD || nd < 3 {
                return conditional_for(&evidences[r], &full.psi);
            }
            let rest: Vec<DatasetEvidence> = evidences
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != r)
                .map(|(_, e)| e.clone())
                .collect();
            let loo = fit(&rest, use_chart)?;
            conditional_for(&evidences[r], &loo.psi)
        })
        .collect()
}

/// `N(μ̂, Σ̂)`.
pub fn predictive(psi: &HyperParams) -> Gaussian {
    Gaussian::from_parts_unchecked(psi.mu.clone(), psi.cov.clone())
}

/// Gaussian approximation of the hyper-posterior at the MAP.
#[derive(Debug, Clone)]
pub struct HyperPosteriorLaplace {
    /// `(μ, eigenvalues)` when charted, `(μ, upper triangle of Σ)` otherwise.
    pub psi_hat: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub charted: bool,
    /// Most negative Hessian eigenvalue and its direction when the Hessian
    /// is not positive definite.
    pub indefinite: Option<(f64, Vec<f64>)>,
}

impl HyperPosteriorLaplace {
    pub fn sd(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn mu_sd(&self, d: usize) -> DVector<f64> {
        self.sd().rows(0, d).into_owned()
    }

    pub fn is_valid(&self) -> bool {
        self.indefinite.is_none()
    }

    /// Standard deviation of each diagonal entry `Σ_ii`. Charted fits need
    /// the eigenbasis, since `Σ_ii = Σ_k V_ik² d_k`.
    pub fn variance_sd(&self, d: usize, chart: Option<&EigenbasisChart>) -> DVector<f64> {
        match (self.charted, chart) {
            (true, Some(ch)) => {
                let c = self.cov.view((d, d), (d, d));
                DVector::from_fn(d, |i, _| {
                    let a = DVector::from_fn(d, |k, _| ch.basis[(i, k)].powi(2));
                    (a.transpose() * c * &a)[(0, 0)].max(0.0).sqrt()
                })
            }
            _ => {
                let idx = upper_indices(d);
                DVector::from_fn(d, |i, _| {
                    let k = idx.iter().position(|&(p, q)| p == i && q == i).unwrap_or(0);
                    self.cov[(d + k, d + k)].max(0.0).sqrt()
                })
            }
        }
    }
}

/// Inverse hyper-Hessian in the active parameterization.
pub fn hyper_laplace(fit: &HyperFit, evidences: &[DatasetEvidence]) -> Result<HyperPosteriorLaplace> {
    let (psi_hat, h, charted) = match &fit.chart {
        Some(ch) => {
            let h = hyper_hessian_chart(&fit.psi.mu, ch, &ch.eigenvalues, evidences)?;
            let mut v: Vec<f64> = fit.psi.mu.iter().cloned().collect();
            v.extend(ch.eigenvalues.iter());
            (DVector::from_vec(v), h, true)
        }
        None => (fit.psi.packed(), hyper_hessian(&fit.psi, evidences)?, false),
    };
    // Chart eigenvalues pinned at zero are held fixed: the posterior is
    // conditioned on the boundary and those coordinates get zero spread.
    let m = h.nrows();
    let d = fit.psi.dim();
    let free: Vec<usize> = (0..m).filter(|&k| !charted || k < d || psi_hat[k] > 0.0).collect();
    let h_free = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let (cov_free, indefinite) = match optim::laplace_inverse(&h_free) {
        Ok(cov) => (cov, None),
        Err(Error::IndefiniteHessian { eigenvalue, direction }) => {
            log::warn!("hyper-Hessian is not positive definite (eigenvalue {eigenvalue:e})");
            let inv = h_free.clone().pseudo_inverse(1e-300).unwrap_or_else(|_| DMatrix::zeros(free.len(), free.len()));
            let mut full_dir = vec![0.0; m];
            for (a, &k) in free.iter().enumerate() {
                full_dir[k] = direction[a];
            }
            (symmetrize(&inv), Some((eigenvalue, full_dir)))
        }
        Err(e) => return Err(e),
    };
    let mut cov = DMatrix::zeros(m, m);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            cov[(i, j)] = cov_free[(a, b)];
        }
    }
    Ok(HyperPosteriorLaplace {
        psi_hat,
        cov,
        charted,
        indefinite,
    })
}
