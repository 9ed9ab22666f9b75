//! Single-mode Bayesian FFT identification over one frequency band.
//!
//! The optimizer works in reduced coordinates
//! `x = (ln f, ln ξ, u, ln S, ln Se)` where `u ∈ R^{n−1}` parameterizes the
//! mode shape through a tangent chart `φ = (φ₀ + T u)/‖φ₀ + T u‖` that is
//! re-centred on every accepted step.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::evidence::DatasetEvidence;
use crate::gaussian::Gaussian;
use crate::linalg::{self, fix_sign, orthogonal_complement, sorted_eigen, symmetrize};
use crate::optim;
use crate::spectral::{FftLine, ResponseOrder};

/// Smallest band accepted by [`mpv`].
pub const MIN_LINES: usize = 10;

/// Mode parameters θ = (f, ξ, φ, S, Se) of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalParams {
    pub f: f64,
    pub xi: f64,
    pub phi: DVector<f64>,
    pub s: f64,
    pub se: f64,
}

impl ModalParams {
    /// Validates positivity and rescales `phi` to unit norm.
    pub fn new(f: f64, xi: f64, phi: DVector<f64>, s: f64, se: f64) -> Result<Self> {
        if !(f > 0.0 && f.is_finite() && xi > 0.0 && xi.is_finite()) {
            return Err(Error::InvalidInput(format!("need f > 0 and ξ > 0, got f={f}, ξ={xi}")));
        }
        if !(s >= 0.0 && s.is_finite() && se >= 0.0 && se.is_finite()) {
            return Err(Error::InvalidInput(format!("need S ≥ 0 and Se ≥ 0, got S={s}, Se={se}")));
        }
        let norm = phi.norm();
        if phi.is_empty() || !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidInput("mode shape must be a finite non-zero vector".into()));
        }
        Ok(ModalParams {
            f,
            xi,
            phi: phi / norm,
            s,
            se,
        })
    }

    pub fn channels(&self) -> usize {
        self.phi.len()
    }

    /// `(f, ξ, φ₁ … φ_n, S, Se)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.channels();
        let mut v = DVector::zeros(n + 4);
        v[0] = self.f;
        v[1] = self.xi;
        v.rows_mut(2, n).copy_from(&self.phi);
        v[n + 2] = self.s;
        v[n + 3] = self.se;
        v
    }

    /// `λ = (f, ξ, φ)`.
    pub fn lambda(&self) -> DVector<f64> {
        self.to_vector().rows(0, self.channels() + 2).into_owned()
    }
}

/// `h = (2πi f_k)^{-q} / (1 − β² − 2ξβi)`, `β = f_k/f`.
pub fn frf(f_k: f64, f: f64, xi: f64, order: ResponseOrder) -> Complex64 {
    let beta = f_k / f;
    let num = Complex64::new(0.0, 2.0 * PI * f_k).powi(-order.q());
    num / Complex64::new(1.0 - beta * beta, -2.0 * xi * beta)
}

/// Dynamic amplification `D_k = |h|²`.
pub fn amplification(f_k: f64, f: f64, xi: f64, order: ResponseOrder) -> f64 {
    let beta = f_k / f;
    let g = (1.0 - beta * beta).powi(2) + 4.0 * xi * xi * beta * beta;
    order_scale(f_k, order) / g
}

fn order_scale(f_k: f64, order: ResponseOrder) -> f64 {
    (2.0 * PI * f_k).powi(-2 * order.q())
}

/// `E_k = S D_k φφᵀ + Se I`.
pub fn psd_model(theta: &ModalParams, f_k: f64, order: ResponseOrder) -> DMatrix<f64> {
    let n = theta.channels();
    let d = amplification(f_k, theta.f, theta.xi, order);
    let mut e = &theta.phi * theta.phi.transpose() * (theta.s * d);
    for i in 0..n {
        e[(i, i)] += theta.se;
    }
    symmetrize(&e)
}

/// FFT lines of one band, split into real and imaginary parts for the
/// likelihood sums.
#[derive(Debug, Clone)]
pub struct Band {
    freqs: Vec<f64>,
    re: Vec<DVector<f64>>,
    im: Vec<DVector<f64>>,
    norm2: Vec<f64>,
    scale: Vec<f64>,
    order: ResponseOrder,
}

impl Band {
    pub fn new(lines: &[FftLine], order: ResponseOrder) -> Result<Self> {
        let first = lines.first().ok_or(Error::TooFewLines { n_f: 0, min: 1 })?;
        let n = first.channels();
        if n == 0 {
            return Err(Error::Dimension("FFT lines have no channels".into()));
        }
        let mut band = Band {
            freqs: Vec::with_capacity(lines.len()),
            re: Vec::with_capacity(lines.len()),
            im: Vec::with_capacity(lines.len()),
            norm2: Vec::with_capacity(lines.len()),
            scale: Vec::with_capacity(lines.len()),
            order,
        };
        for line in lines {
            if line.channels() != n {
                return Err(Error::Dimension(format!("FFT lines have {} and {} channels", n, line.channels())));
            }
            if !(line.freq > 0.0 && line.freq.is_finite()) || line.values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::InvalidInput(format!("invalid FFT line at {} Hz", line.freq)));
            }
            let re = line.values.map(|z| z.re);
            let im = line.values.map(|z| z.im);
            band.norm2.push(re.norm_squared() + im.norm_squared());
            band.re.push(re);
            band.im.push(im);
            band.freqs.push(line.freq);
            band.scale.push(order_scale(line.freq, order));
        }
        Ok(band)
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.re[0].len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn order(&self) -> ResponseOrder {
        self.order
    }

    fn check(&self, theta: &ModalParams) -> Result<()> {
        if theta.channels() != self.channels() {
            return Err(Error::Dimension(format!(
                "θ has {} channels, band has {}",
                theta.channels(),
                self.channels()
            )));
        }
        if !(theta.se > 0.0) || theta.s < 0.0 {
            return Err(Error::InvalidInput(format!("need S ≥ 0 and Se > 0, got S={}, Se={}", theta.s, theta.se)));
        }
        Ok(())
    }
}

/// Negative log-likelihood over one band, rank-one fast form.
pub fn nll(theta: &ModalParams, band: &Band) -> Result<f64> {
    band.check(theta)?;
    let n = band.channels() as f64;
    let lnse = theta.se.ln();
    let mut total = band.len() as f64 * n * PI.ln();
    for k in 0..band.len() {
        let a = theta.s * amplification(band.freqs[k], theta.f, theta.xi, band.order);
        let c = theta.se + a;
        let p = theta.phi.dot(&band.re[k]).powi(2) + theta.phi.dot(&band.im[k]).powi(2);
        total += (n - 1.0) * lnse + c.ln() + (band.norm2[k] - p) / theta.se + p / c;
    }
    Ok(total)
}

/// Negative log-likelihood by explicit determinant and solve.
pub fn nll_direct(theta: &ModalParams, band: &Band) -> Result<f64> {
    band.check(theta)?;
    let n = band.channels() as f64;
    let mut total = band.len() as f64 * n * PI.ln();
    for k in 0..band.len() {
        let e = psd_model(theta, band.freqs[k], band.order);
        let chol = linalg::cholesky(&e, "E_k")?;
        let quad = band.re[k].dot(&chol.solve(&band.re[k])) + band.im[k].dot(&chol.solve(&band.im[k]));
        total += linalg::chol_logdet(&chol) + quad;
    }
    Ok(total)
}

/// Tangent chart on the unit sphere centred at `center`.
#[derive(Debug, Clone)]
struct Chart {
    center: DVector<f64>,
    basis: DMatrix<f64>,
}

impl Chart {
    fn new(center: &DVector<f64>) -> Self {
        Chart {
            center: center.clone(),
            basis: orthogonal_complement(center),
        }
    }

    fn dim(&self) -> usize {
        self.center.len() + 3
    }

    fn encode(&self, theta: &ModalParams) -> DVector<f64> {
        let n = self.center.len();
        let mut x = DVector::zeros(n + 3);
        x[0] = theta.f.ln();
        x[1] = theta.xi.ln();
        x[n + 1] = theta.s.ln();
        x[n + 2] = theta.se.ln();
        x
    }

    fn decode(&self, x: &DVector<f64>) -> (ModalParams, f64) {
        let n = self.center.len();
        let v = &self.center + &self.basis * x.rows(2, n - 1);
        let nv = v.norm();
        let theta = ModalParams {
            f: x[0].exp(),
            xi: x[1].exp(),
            phi: v / nv,
            s: x[n + 1].exp(),
            se: x[n + 2].exp(),
        };
        (theta, nv)
    }
}

/// Objective and analytic gradient in chart coordinates.
fn value_gradient(band: &Band, chart: &Chart, x: &DVector<f64>) -> (f64, DVector<f64>) {
    let n = band.channels();
    let nf = n as f64;
    let (theta, nv) = chart.decode(x);
    let (f, xi, s, se) = (theta.f, theta.xi, theta.s, theta.se);
    let lnse = se.ln();
    let mut value = band.len() as f64 * nf * PI.ln();
    let (mut gf, mut gxi, mut gs, mut gse) = (0.0, 0.0, 0.0, 0.0);
    let mut gphi = DVector::zeros(n);
    for k in 0..band.len() {
        let beta = band.freqs[k] / f;
        let b2 = beta * beta;
        let g = (1.0 - b2).powi(2) + 4.0 * xi * xi * b2;
        let ck = band.scale[k];
        let d = ck / g;
        let a = s * d;
        let c = se + a;
        let pr = theta.phi.dot(&band.re[k]);
        let pi = theta.phi.dot(&band.im[k]);
        let p = pr * pr + pi * pi;
        let nk = band.norm2[k];
        value += (nf - 1.0) * lnse + c.ln() + (nk - p) / se + p / c;

        let dl_da = 1.0 / c - p / (c * c);
        let dl_dse = (nf - 1.0) / se + 1.0 / c - (nk - p) / (se * se) - p / (c * c);
        let dl_dp = -1.0 / se + 1.0 / c;
        let dg_dbeta = -4.0 * beta * (1.0 - b2) + 8.0 * xi * xi * beta;
        let dd_df = ck / (g * g) * dg_dbeta * beta / f;
        let dd_dxi = -ck / (g * g) * 8.0 * xi * b2;
        gf += dl_da * s * dd_df;
        gxi += dl_da * s * dd_dxi;
        gs += dl_da * d;
        gse += dl_dse;
        gphi.axpy(2.0 * dl_dp * pr, &band.re[k], 1.0);
        gphi.axpy(2.0 * dl_dp * pi, &band.im[k], 1.0);
    }
    let mut grad = DVector::zeros(n + 3);
    grad[0] = f * gf;
    grad[1] = xi * gxi;
    if n > 1 {
        let proj = &gphi - &theta.phi * theta.phi.dot(&gphi);
        grad.rows_mut(2, n - 1).copy_from(&(chart.basis.transpose() * proj / nv));
    }
    grad[n + 1] = s * gs;
    grad[n + 2] = se * gse;
    (value, grad)
}

fn value_at(band: &Band, chart: &Chart, x: &DVector<f64>) -> f64 {
    let (theta, _) = chart.decode(x);
    nll(&theta, band).unwrap_or(f64::INFINITY)
}

fn hessian_at(band: &Band, chart: &Chart, x: &DVector<f64>) -> DMatrix<f64> {
    optim::fd_hessian(|y| value_gradient(band, chart, y).1, x)
}

/// Stopping rules for [`mpv_with`].
#[derive(Debug, Clone)]
pub struct MpvOptions {
    pub max_iterations: usize,
    /// Relative objective decrease below which the iteration may stop.
    pub rel_tol: f64,
    /// Gradient norm (chart coordinates) required for convergence, relative
    /// to `max(1, |NLL|)`.
    pub grad_tol: f64,
}

impl Default for MpvOptions {
    fn default() -> Self {
        MpvOptions {
            max_iterations: 500,
            rel_tol: 1e-10,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpvOutcome {
    pub theta: ModalParams,
    pub nll: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

/// Most probable value with default options.
pub fn mpv(band: &Band, init: &ModalParams) -> Result<MpvOutcome> {
    mpv_with(band, init, &MpvOptions::default())
}

/// Largest move of any chart coordinate in one iteration (log scale for
/// f, ξ, S, Se).
const MAX_STEP: f64 = 1.0;

/// Damped Newton descent on the NLL. The Hessian is a central difference of
/// the analytic gradient; steps that do not decrease the objective are
/// rejected and the damping raised.
pub fn mpv_with(band: &Band, init: &ModalParams, opts: &MpvOptions) -> Result<MpvOutcome> {
    if band.len() < MIN_LINES {
        return Err(Error::TooFewLines {
            n_f: band.len(),
            min: MIN_LINES,
        });
    }
    band.check(init)?;
    if !(init.s > 0.0) {
        return Err(Error::InvalidInput("initial S must be positive".into()));
    }
    let mut theta = init.clone();
    let mut damping = 0.0;
    let mut last_rel = f64::INFINITY;
    let mut value = nll(&theta, band)?;
    for iter in 0..opts.max_iterations {
        let chart = Chart::new(&theta.phi);
        let x = chart.encode(&theta);
        let (_, grad) = value_gradient(band, &chart, &x);
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(Error::InvalidInput("non-finite gradient".into()));
        }
        let grad_ok = gnorm < opts.grad_tol * value.abs().max(1.0);
        let h = hessian_at(band, &chart, &x);
        let step = optim::damped_newton_step(&h, &grad, damping);
        let predicted_rel = step
            .as_ref()
            .map_or(f64::INFINITY, |(p, _)| (-0.5 * grad.dot(p)).abs() / value.abs().max(1.0));
        // An undamped Newton step on a positive definite Hessian whose predicted
        // decrease is negligible: the gradient is at its roundoff floor.
        let newton_done = matches!(step, Some((_, d)) if d == 0.0) && predicted_rel < 1e-3 * opts.rel_tol;
        if (grad_ok && (last_rel < opts.rel_tol || predicted_rel < opts.rel_tol)) || newton_done {
            return Ok(MpvOutcome {
                theta,
                nll: value,
                iterations: iter,
                converged: true,
                gradient_norm: gnorm,
            });
        }
        let Some((mut p, used)) = step else {
            return Ok(stalled(theta, value, iter, gnorm, grad_ok));
        };
        let longest = p.amax();
        if longest > MAX_STEP {
            p *= MAX_STEP / longest;
        }
        damping = used;
        let slope = grad.dot(&p);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &p * t;
            let v = value_at(band, &chart, &trial);
            if v.is_finite() && v <= value + 1e-4 * t * slope && v <= value {
                accepted = Some((trial, v));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, v)) => {
                last_rel = (value - v) / value.abs().max(1.0);
                value = v;
                theta = chart.decode(&trial).0;
                damping = if t == 1.0 { damping * 0.1 } else { damping };
                if damping < 1e-12 {
                    damping = 0.0;
                }
            }
            None => {
                if grad_ok {
                    return Ok(MpvOutcome {
                        theta,
                        nll: value,
                        iterations: iter,
                        converged: true,
                        gradient_norm: gnorm,
                    });
                }
                damping = if damping == 0.0 { 1e-4 } else { damping * 10.0 };
                if damping > 1e12 {
                    return Ok(stalled(theta, value, iter, gnorm, grad_ok));
                }
            }
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iterations,
        objective: value,
    })
}

fn stalled(theta: ModalParams, value: f64, iter: usize, gnorm: f64, grad_ok: bool) -> MpvOutcome {
    log::warn!("MPV search stalled at iteration {iter} with gradient norm {gnorm:e}");
    MpvOutcome {
        theta,
        nll: value,
        iterations: iter,
        converged: grad_ok,
        gradient_norm: gnorm,
    }
}

/// Laplace posterior over `(f, ξ, φ, S, Se)`.
#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    pub theta_hat: ModalParams,
    pub cov: DMatrix<f64>,
}

/// Inverse Hessian in chart coordinates mapped to `(f, ξ, φ, S, Se)` by the
/// delta method. The φ-block is singular along `φ̂`.
pub fn laplace(theta_hat: &ModalParams, band: &Band) -> Result<LaplacePosterior> {
    band.check(theta_hat)?;
    let chart = Chart::new(&theta_hat.phi);
    let x = chart.encode(theta_hat);
    let cov_x = optim::laplace_inverse(&hessian_at(band, &chart, &x))?;
    let n = band.channels();
    let mut jac = DMatrix::zeros(n + 4, chart.dim());
    jac[(0, 0)] = theta_hat.f;
    jac[(1, 1)] = theta_hat.xi;
    if n > 1 {
        jac.view_mut((2, 2), (n, n - 1)).copy_from(&chart.basis);
    }
    jac[(n + 2, n + 1)] = theta_hat.s;
    jac[(n + 3, n + 2)] = theta_hat.se;
    let cov = symmetrize(&(&jac * cov_x * jac.transpose()));
    Ok(LaplacePosterior {
        theta_hat: theta_hat.clone(),
        cov,
    })
}

/// Starting point from the band's sample PSD.
pub fn initial_guess(band: &Band) -> Result<ModalParams> {
    let nl = band.len();
    if nl < MIN_LINES {
        return Err(Error::TooFewLines { n_f: nl, min: MIN_LINES });
    }
    let n = band.channels();
    let outer = |k: usize| &band.re[k] * band.re[k].transpose() + &band.im[k] * band.im[k].transpose();
    let half_width = (nl / 60).max(2);
    let window = |k: usize| k.saturating_sub(half_width)..(k + half_width + 1).min(nl);
    let smoothed: Vec<f64> = (0..nl)
        .map(|k| {
            let r = window(k);
            let m = r.len() as f64;
            let sum = r.fold(DMatrix::zeros(n, n), |acc, j| acc + outer(j));
            sorted_eigen(&(sum / m)).0[0]
        })
        .collect();
    let total: f64 = band.norm2.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("band carries no energy".into()));
    }
    let peak = (0..nl).max_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b])).unwrap_or(0);
    let f0 = band.freqs[peak];
    let near = window(peak).fold(DMatrix::zeros(n, n), |acc, j| acc + outer(j));
    let (_, vecs) = sorted_eigen(&near);
    let mut phi0 = vecs.column(0).into_owned();
    fix_sign(&mut phi0);

    let se0 = if n > 1 {
        let mean = (0..nl)
            .map(|k| (band.norm2[k] - phi0.dot(&band.re[k]).powi(2) - phi0.dot(&band.im[k]).powi(2)) / (n - 1) as f64)
            .sum::<f64>()
            / nl as f64;
        mean.max(0.0)
    } else {
        let mut sorted = band.norm2.clone();
        sorted.sort_by(f64::total_cmp);
        sorted[nl / 4]
    };
    let se0 = if se0 > 0.0 { se0 } else { 1e-6 * total / nl as f64 };

    let top = smoothed[peak];
    let half = se0 + 0.5 * (top - se0);
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = peak;
        for k in range {
            if smoothed[k] < half {
                let (v0, v1) = (smoothed[prev], smoothed[k]);
                let w = if v0 != v1 { (v0 - half) / (v0 - v1) } else { 0.5 };
                return Some(band.freqs[prev] + w * (band.freqs[k] - band.freqs[prev]));
            }
            prev = k;
        }
        None
    };
    let left = crossing(&mut (0..peak).rev());
    let right = crossing(&mut (peak + 1..nl));
    let xi0 = match (left, right) {
        (Some(l), Some(r)) if top > se0 => ((r - l) / (2.0 * f0)).clamp(0.001, 0.1),
        (Some(l), None) if top > se0 => ((f0 - l) / f0).clamp(0.001, 0.1),
        (None, Some(r)) if top > se0 => ((r - f0) / f0).clamp(0.001, 0.1),
        _ => {
            log::debug!("flat band: damping initial guess falls back to 0.01");
            0.01
        }
    };
    let excess = if top > se0 { top - se0 } else { top };
    let s0 = (excess * 4.0 * xi0 * xi0 / order_scale(f0, band.order)).max(f64::MIN_POSITIVE);
    ModalParams::new(f0, xi0, phi0, s0, se0)
}

/// Damping ratios tried as alternative starts by [`identify`].
const XI_STARTS: [f64; 4] = [0.005, 0.01, 0.02, 0.05];

/// The automatic guess followed by variants on a damping grid, with S
/// rescaled to keep the peak height.
pub fn start_points(band: &Band) -> Result<Vec<ModalParams>> {
    let base = initial_guess(band)?;
    let mut starts = vec![base.clone()];
    for xi in XI_STARTS {
        if (xi / base.xi).ln().abs() > 0.3 {
            let s = base.s * (xi / base.xi).powi(2);
            starts.push(ModalParams { xi, s, ..base.clone() });
        }
    }
    Ok(starts)
}

/// MPV (best over [`start_points`]) and its Laplace posterior.
#[derive(Debug, Clone)]
pub struct Identification {
    pub outcome: MpvOutcome,
    pub posterior: LaplacePosterior,
}

pub fn identify(band: &Band) -> Result<Identification> {
    let mut best: Option<MpvOutcome> = None;
    let mut last_err = None;
    for init in start_points(band)? {
        match mpv(band, &init) {
            Ok(o) if best.as_ref().is_none_or(|b| better(&o, b)) => best = Some(o),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let outcome = match (best, last_err) {
        (Some(o), _) => o,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("start_points is never empty"),
    };
    let posterior = laplace(&outcome.theta, band)?;
    Ok(Identification { outcome, posterior })
}

fn better(a: &MpvOutcome, b: &MpvOutcome) -> bool {
    (a.converged, -a.nll) > (b.converged, -b.nll)
}

/// Split a posterior into the dynamical evidence over `(f, ξ, φ)` and the
/// nuisance block over `(S, Se)`.
pub fn split_evidence(lp: &LaplacePosterior, dataset_id: &str) -> Result<(DatasetEvidence, Gaussian)> {
    let n = lp.theta_hat.channels();
    let d = n + 2;
    let lambda = lp.theta_hat.lambda();
    let cov_l = lp.cov.view((0, 0), (d, d)).into_owned();
    let eta_mean = DVector::from_vec(vec![lp.theta_hat.s, lp.theta_hat.se]);
    let eta_cov = lp.cov.view((d, d), (2, 2)).into_owned();
    let evidence = DatasetEvidence::new(dataset_id, lambda, cov_l)?;
    let eta = Gaussian::new(eta_mean, eta_cov)?;
    Ok((evidence, eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> ModalParams {
        let phi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        ModalParams::new(
            rng.random_range(1.0..10.0),
            rng.random_range(0.005..0.08),
            phi,
            rng.random_range(0.1..10.0),
            rng.random_range(0.01..1.0),
        )
        .unwrap()
    }

    fn random_band(rng: &mut ChaCha8Rng, n: usize, f: f64, lines: usize, order: ResponseOrder) -> Band {
        let lines: Vec<FftLine> = (0..lines)
            .map(|k| FftLine {
                freq: f * (0.9 + 0.2 * k as f64 / lines as f64),
                values: DVector::from_fn(n, |_, _| {
                    Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                }),
            })
            .collect();
        Band::new(&lines, order).unwrap()
    }

    fn model_band(rng: &mut ChaCha8Rng, th: &ModalParams, lines: usize) -> Band {
        let n = th.channels();
        let lines: Vec<FftLine> = (0..lines)
            .map(|k| {
                let freq = th.f * (0.8 + 0.4 * k as f64 / lines as f64);
                let root = linalg::psd_sqrt(&(psd_model(th, freq, ResponseOrder::Acceleration) * 0.5));
                let z1 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z2 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let (a, b) = (&root * z1, &root * z2);
                FftLine {
                    freq,
                    values: DVector::from_fn(n, |i, _| Complex64::new(a[i], b[i])),
                }
            })
            .collect();
        Band::new(&lines, ResponseOrder::Acceleration).unwrap()
    }

    #[test]
    fn mpv_recovers_model_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let th = ModalParams::new(4.2, 0.02, DVector::from_vec(vec![0.3, -0.5, 0.8]), 2.0, 0.05).unwrap();
        let band = model_band(&mut rng, &th, 120);
        let id = identify(&band).unwrap();
        assert!(id.outcome.converged);
        let sd = id.posterior.cov.diagonal().map(f64::sqrt);
        assert!((id.outcome.theta.f - th.f).abs() < 4.0 * sd[0]);
        assert!((id.outcome.theta.xi - th.xi).abs() < 4.0 * sd[1]);
    }

    #[test]
    fn wide_band_recovers_from_narrow_start() {
        // 600 lines over ±20% at ξ = 0.05: the smoothed peak is noisy and the
        // half-power estimate of ξ is poor, so alternative starts matter.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let th = ModalParams::new(4.2, 0.05, DVector::from_vec(vec![0.37, 0.62, 0.69]), 1.5, 0.07).unwrap();
        for _ in 0..10 {
            let band = model_band(&mut rng, &th, 600);
            let id = identify(&band).unwrap();
            assert!(id.outcome.converged);
            let sd = id.posterior.cov.diagonal().map(f64::sqrt);
            assert!((id.outcome.theta.f - th.f).abs() < 5.0 * sd[0], "f = {}", id.outcome.theta.f);
        }
    }

    #[test]
    fn start_points_lead_with_the_guess() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let th = ModalParams::new(3.0, 0.02, DVector::from_vec(vec![0.6, 0.8]), 1.0, 0.05).unwrap();
        let band = model_band(&mut rng, &th, 100);
        let starts = start_points(&band).unwrap();
        assert_eq!(starts[0], initial_guess(&band).unwrap());
        for s in &starts[1..] {
            assert_eq!((s.f, &s.phi, s.se), (starts[0].f, &starts[0].phi, starts[0].se));
            assert!((s.s / s.xi.powi(2) - starts[0].s / starts[0].xi.powi(2)).abs() < 1e-9 * starts[0].s / starts[0].xi.powi(2));
        }
    }

    #[test]
    fn frf_resonance_and_static_limits() {
        let h = frf(3.0, 3.0, 0.05, ResponseOrder::Acceleration);
        assert!((h.norm() - 10.0).abs() < 1e-12);
        assert!((h - Complex64::new(0.0, 10.0)).norm() < 1e-12);
        let h0 = frf(0.001 * 5.0, 5.0, 0.01, ResponseOrder::Acceleration);
        assert!((h0.re - 1.0).abs() < 2e-6);
        assert!((h0.im - 2e-5).abs() < 1e-9);
    }

    #[test]
    fn frf_displacement_matches_direct_evaluation() {
        let h = frf(1.0, 2.0, 0.05, ResponseOrder::Displacement);
        let two_pi_i = Complex64::new(0.0, 2.0 * PI);
        let expected = Complex64::new(1.0, 0.0) / (two_pi_i * two_pi_i) / Complex64::new(0.75, -0.05);
        assert!((h - expected).norm() < 1e-15 * expected.norm());
        let d = amplification(1.0, 2.0, 0.05, ResponseOrder::Displacement);
        assert!((d - h.norm_sqr()).abs() < 1e-14 * d);
    }

    #[test]
    fn psd_model_cases() {
        let phi = DVector::from_vec(vec![1.0]);
        let th = ModalParams::new(2.0, 0.05, phi, 1.0, 0.0).unwrap();
        let e = psd_model(&th, 2.0, ResponseOrder::Acceleration);
        assert!((e[(0, 0)] - 100.0).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let th = random_theta(&mut rng, 4);
        let e = psd_model(&th, th.f * 1.01, ResponseOrder::Velocity);
        let (vals, _) = sorted_eigen(&e);
        let d = amplification(th.f * 1.01, th.f, th.xi, ResponseOrder::Velocity);
        assert!((vals[0] - th.se - th.s * d).abs() < 1e-10 * vals[0]);
        for i in 1..4 {
            assert!((vals[i] - th.se).abs() < 1e-10 * vals[0]);
        }
        let zero = ModalParams { s: 0.0, ..th.clone() };
        assert_eq!(psd_model(&zero, 3.0, ResponseOrder::Acceleration), DMatrix::identity(4, 4) * th.se);
    }

    #[test]
    fn nll_pure_noise_single_line() {
        let lines = vec![FftLine {
            freq: 1.0,
            values: DVector::from_element(1, Complex64::new(0.0, 0.0)),
        }];
        let band = Band::new(&lines, ResponseOrder::Acceleration).unwrap();
        let th = ModalParams::new(1.0, 0.01, DVector::from_element(1, 1.0), 0.0, 1.0).unwrap();
        assert!((nll(&th, &band).unwrap() - PI.ln()).abs() < 1e-15);
    }

    #[test]
    fn fast_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let th = random_theta(&mut rng, 3);
            let band = random_band(&mut rng, 3, th.f, 5, ResponseOrder::Acceleration);
            let a = nll(&th, &band).unwrap();
            let b = nll_direct(&th, &band).unwrap();
            assert!((a - b).abs() < 1e-10 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_negative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let th = random_theta(&mut rng, 2);
        let band = random_band(&mut rng, 2, th.f, 5, ResponseOrder::Acceleration);
        let bad = ModalParams { se: 0.0, ..th };
        assert!(nll(&bad, &band).is_err());
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 4] {
            for order in [ResponseOrder::Acceleration, ResponseOrder::Displacement] {
                let th = random_theta(&mut rng, n);
                let band = random_band(&mut rng, n, th.f, 12, order);
                let chart = Chart::new(&th.phi);
                let mut x = chart.encode(&th);
                for i in 2..n + 1 {
                    x[i] = 0.1 * rng.random_range(-1.0..1.0);
                }
                let (_, g) = value_gradient(&band, &chart, &x);
                let g_fd = optim::fd_gradient(|y| value_at(&band, &chart, y), &x);
                let scale = g.norm().max(1.0);
                assert!((&g - &g_fd).norm() < 1e-6 * scale, "n={n} {g} vs {g_fd}");
            }
        }
    }

    #[test]
    fn hessian_matches_value_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th = random_theta(&mut rng, 3);
        let band = random_band(&mut rng, 3, th.f, 15, ResponseOrder::Acceleration);
        let chart = Chart::new(&th.phi);
        let x = chart.encode(&th);
        let h = hessian_at(&band, &chart, &x);
        let h_fd = optim::fd_hessian_of_value(|y| value_at(&band, &chart, y), &x, 1e-4);
        assert!((&h - &h_fd).norm() < 1e-4 * h.norm());
    }

    #[test]
    fn mpv_requires_ten_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = random_theta(&mut rng, 2);
        let band = random_band(&mut rng, 2, th.f, 5, ResponseOrder::Acceleration);
        assert!(matches!(mpv(&band, &th), Err(Error::TooFewLines { n_f: 5, .. })));
    }

    #[test]
    fn laplace_block_is_orthogonal_to_mode_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let th = ModalParams::new(4.2, 0.02, DVector::from_vec(vec![0.3, -0.5, 0.8]), 2.0, 0.05).unwrap();
        let band = model_band(&mut rng, &th, 60);
        let out = mpv(&band, &initial_guess(&band).unwrap()).unwrap();
        let lp = laplace(&out.theta, &band).unwrap();
        let block = lp.cov.view((2, 2), (3, 3)).into_owned();
        assert!((&block * &out.theta.phi).norm() < 1e-6 * block.norm());
        assert!((out.theta.phi.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_selects_blocks() {
        let th = ModalParams::new(2.0, 0.02, DVector::from_vec(vec![0.6, 0.8]), 1.0, 0.5).unwrap();
        let mut cov = DMatrix::identity(6, 6) * 0.01;
        cov[(0, 4)] = 0.001;
        cov[(4, 0)] = 0.001;
        let lp = LaplacePosterior { theta_hat: th, cov: cov.clone() };
        let (ev, eta) = split_evidence(&lp, "a").unwrap();
        assert_eq!(ev.cov(), &cov.view((0, 0), (4, 4)).into_owned());
        assert_eq!(eta.cov(), &cov.view((4, 4), (2, 2)).into_owned());
        assert_eq!(ev.lambda_hat().as_slice(), &[2.0, 0.02, 0.6, 0.8]);
    }
}
