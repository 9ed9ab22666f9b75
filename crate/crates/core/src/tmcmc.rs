//! Transitional MCMC over the hyper-posterior and Gaussian-mixture summaries
//! of the conditional and predictive distributions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evidence::DatasetEvidence;
use crate::gaussian::{assemble_covariance, gain_matrix, gain_posterior_cov, CorrelationSpec, Gaussian};
use crate::hierarchical::{hyper_nll, EigenbasisChart, HyperParams, HyperPrior};
use crate::linalg::{chol_logdet, cholesky_jittered, clip_negative_eigenvalues, is_psd, symmetrize, LN_2PI};

/// Coordinates in which ψ is sampled.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperCoords {
    /// `(μ, eigenvalues)` over a fixed eigenbasis.
    Chart(EigenbasisChart),
    /// `(μ, σ, ρ)`; Σ = S R S with R from its analytic Cholesky factor.
    Correlation { dim: usize },
}

impl HyperCoords {
    pub fn dim(&self) -> usize {
        match self {
            HyperCoords::Chart(c) => c.dim(),
            HyperCoords::Correlation { dim } => *dim,
        }
    }

    /// Number of sampling coordinates.
    pub fn len(&self) -> usize {
        let d = self.dim();
        match self {
            HyperCoords::Chart(_) => 2 * d,
            HyperCoords::Correlation { .. } => 2 * d + d * (d - 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// ψ at sampling coordinates `x`; `None` when the implied correlation
    /// matrix is not positive definite.
    pub fn decode(&self, x: &DVector<f64>) -> Option<HyperParams> {
        let d = self.dim();
        let mu = x.rows(0, d).into_owned();
        let cov = match self {
            HyperCoords::Chart(c) => c.assemble(&x.rows(d, d).into_owned()),
            HyperCoords::Correlation { .. } => {
                let sigmas: Vec<f64> = x.rows(d, d).iter().cloned().collect();
                let rhos: Vec<f64> = x.rows(2 * d, d * (d - 1) / 2).iter().cloned().collect();
                let spec = CorrelationSpec::new(sigmas, rhos).ok()?;
                assemble_covariance(&spec).ok()?
            }
        };
        HyperParams::new(mu, cov).ok()
    }
}

/// Uniform prior over the sampling coordinates. A coordinate with
/// `lo == hi` is held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl PriorBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("prior bounds have different lengths".into()));
        }
        if (0..lo.len()).any(|i| !(lo[i].is_finite() && hi[i].is_finite() && lo[i] <= hi[i])) {
            return Err(Error::InvalidInput("prior box needs finite bounds with lo ≤ hi".into()));
        }
        Ok(PriorBox { lo, hi })
    }

    /// Box over `coords` from bounds on μ and on the variance scale. For
    /// correlation coordinates the σ bounds are square roots of the variance
    /// bounds and every ρ lies in (−1, 1).
    pub fn from_prior(prior: &HyperPrior, coords: &HyperCoords) -> Result<Self> {
        let d = coords.dim();
        if prior.dim() != d {
            return Err(Error::Dimension(format!("prior has dimension {}, coordinates {d}", prior.dim())));
        }
        let mut lo: Vec<f64> = prior.mu_lo.iter().cloned().collect();
        let mut hi: Vec<f64> = prior.mu_hi.iter().cloned().collect();
        match coords {
            HyperCoords::Chart(_) => {
                lo.extend(prior.var_lo.iter());
                hi.extend(prior.var_hi.iter());
            }
            HyperCoords::Correlation { .. } => {
                lo.extend(prior.var_lo.iter().map(|v| v.max(0.0).sqrt()));
                hi.extend(prior.var_hi.iter().map(|v| v.max(0.0).sqrt()));
                lo.extend(std::iter::repeat_n(-1.0, d * (d - 1) / 2));
                hi.extend(std::iter::repeat_n(1.0, d * (d - 1) / 2));
            }
        }
        PriorBox::new(DVector::from_vec(lo), DVector::from_vec(hi))
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.len() && (0..self.len()).all(|i| self.lo[i] <= x[i] && x[i] <= self.hi[i])
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    fn free(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.lo[i] < self.hi[i]).collect()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            if self.lo[i] < self.hi[i] {
                rng.random_range(self.lo[i]..self.hi[i])
            } else {
                self.lo[i]
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TmcmcOptions {
    pub samples: usize,
    /// Target coefficient of variation of the incremental weights.
    pub cov_target: f64,
    /// Proposal scale: proposal covariance is `β²` times the weighted sample covariance.
    pub beta: f64,
    /// Metropolis steps per chain per stage.
    pub mh_steps: usize,
    pub max_stages: usize,
}

impl Default for TmcmcOptions {
    fn default() -> Self {
        TmcmcOptions {
            samples: 2000,
            cov_target: 1.0,
            beta: 0.2,
            mh_steps: 5,
            max_stages: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperSampleSet {
    /// Samples in sampling coordinates.
    pub coords_samples: Vec<DVector<f64>>,
    /// Decoded ψ for each sample.
    pub hypers: Vec<HyperParams>,
    /// `−L(ψ)` at each final sample (log-likelihood up to a constant).
    pub log_target_values: Vec<f64>,
    pub stage_exponents: Vec<f64>,
    pub rng_seed: u64,
    /// Log of the normalizing constant of the likelihood over the prior box,
    /// up to the constant dropped from the hyper-NLL. The truncation of the μ
    /// conditional to its box is not counted.
    pub log_evidence: f64,
    /// Metropolis acceptance rate per stage.
    pub acceptance: Vec<f64>,
    pub coords: HyperCoords,
}

impl HyperSampleSet {
    pub fn len(&self) -> usize {
        self.hypers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypers.is_empty()
    }

    /// Samples as packed ψ vectors.
    pub fn packed(&self) -> Vec<DVector<f64>> {
        self.hypers.iter().map(HyperParams::packed).collect()
    }

    /// Sample mean of μ.
    pub fn mean_mu(&self) -> DVector<f64> {
        let d = self.coords.dim();
        self.hypers.iter().fold(DVector::zeros(d), |a, h| a + &h.mu) / self.len() as f64
    }

    /// Sample mean and covariance of the sampling coordinates.
    pub fn coords_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        weighted_moments(&self.coords_samples, &vec![1.0 / self.len() as f64; self.len()])
    }
}

fn stage_rng(seed: u64, stage: usize, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | chain as u64);
    rng
}

fn log_likelihood(evidences: &[DatasetEvidence], coords: &HyperCoords, x: &DVector<f64>) -> f64 {
    if evidences.is_empty() {
        return if coords.decode(x).is_some() { 0.0 } else { f64::NEG_INFINITY };
    }
    match coords.decode(x) {
        Some(psi) => hyper_nll(&psi, evidences).map_or(f64::NEG_INFINITY, |v| -v),
        None => f64::NEG_INFINITY,
    }
}

/// The likelihood is Gaussian in μ for fixed Σ. With `H = Σ_s (Σ + Σ̂_s)⁻¹`
/// and the μ coordinates split into free `F` and fixed `X`, the conditional
/// of `μ_F` is `N(μ*_F, H_FF⁻¹)`.
struct MuConditional {
    /// `ln ∫ exp(−L(μ, Σ)) dμ_F / vol(box_F)`.
    log_marginal: f64,
    mu_star: DVector<f64>,
    precision: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn mu_conditional(evidences: &[DatasetEvidence], coords: &HyperCoords, prior: &PriorBox, x: &DVector<f64>) -> Option<MuConditional> {
    let d = coords.dim();
    let sigma = coords.decode(x)?.cov;
    let mut chols = Vec::with_capacity(evidences.len());
    let mut h = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    // origin shifted to the plain average, as in `optimal_mu`
    let mut origin = evidences.iter().fold(DVector::zeros(d), |a, ev| a + ev.lambda_hat()) / evidences.len() as f64;
    for i in 0..d {
        if prior.lo[i] >= prior.hi[i] {
            origin[i] = prior.lo[i];
        }
    }
    for ev in evidences {
        let c = cholesky_jittered(&symmetrize(&(&sigma + ev.cov_regularized())), "Σ + Σ̂").ok()?;
        let b = c.inverse();
        rhs += &b * (ev.lambda_hat() - &origin);
        h += b;
        chols.push(c);
    }
    let free: Vec<usize> = (0..d).filter(|&i| prior.lo[i] < prior.hi[i]).collect();
    let h = symmetrize(&h);
    let h_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let target = DVector::from_fn(free.len(), |a, _| rhs[free[a]]);
    let precision = cholesky_jittered(&h_ff, "Σ_s (Σ + Σ̂_s)⁻¹").ok()?;
    let solved = precision.solve(&target);
    let mut mu_star = origin;
    for (a, &i) in free.iter().enumerate() {
        mu_star[i] += solved[a];
    }
    let mut nll = 0.0;
    for (c, ev) in chols.iter().zip(evidences) {
        let r = &mu_star - ev.lambda_hat();
        nll += 0.5 * (chol_logdet(c) + r.dot(&c.solve(&r)));
    }
    let log_volume: f64 = free.iter().map(|&i| (prior.hi[i] - prior.lo[i]).ln()).sum();
    let log_marginal = -nll + 0.5 * free.len() as f64 * LN_2PI - 0.5 * chol_logdet(&precision) - log_volume;
    log_marginal.is_finite().then_some(MuConditional {
        log_marginal,
        mu_star,
        precision,
    })
}

/// Exact draw of μ from its conditional, truncated to the box by rejection.
fn draw_mu<R: Rng + ?Sized>(cond: &MuConditional, prior: &PriorBox, rng: &mut R) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..cond.mu_star.len()).filter(|&i| prior.lo[i] < prior.hi[i]).collect();
    let lt = cond.precision.l().transpose();
    for _ in 0..1000 {
        let z = DVector::from_fn(free.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let offset = lt.solve_upper_triangular(&z)?;
        let mut mu = cond.mu_star.clone();
        for (a, &i) in free.iter().enumerate() {
            mu[i] += offset[a];
        }
        if free.iter().all(|&i| prior.lo[i] <= mu[i] && mu[i] <= prior.hi[i]) {
            return Some(mu);
        }
    }
    None
}

fn weighted_moments(xs: &[DVector<f64>], w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let m = xs[0].len();
    let mut mean = DVector::zeros(m);
    for (x, &wi) in xs.iter().zip(w) {
        mean.axpy(wi, x, 1.0);
    }
    let mut cov = DMatrix::zeros(m, m);
    for (x, &wi) in xs.iter().zip(w) {
        let r = x - &mean;
        cov += &r * r.transpose() * wi;
    }
    (mean, symmetrize(&cov))
}

fn coefficient_of_variation(l: &[f64], l_max: f64, delta: f64) -> f64 {
    let w: Vec<f64> = l.iter().map(|&v| (delta * (v - l_max)).exp()).collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return f64::INFINITY;
    }
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Tempering increment with weight CoV equal to `target`, capped at `1 − p`.
fn next_increment(l: &[f64], p: f64, target: f64) -> f64 {
    let l_max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let room = 1.0 - p;
    if coefficient_of_variation(l, l_max, room) <= target {
        return room;
    }
    let (mut lo, mut hi) = (0.0, room);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if coefficient_of_variation(l, l_max, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 * room.max(1e-300) {
            break;
        }
    }
    lo.max(f64::MIN_POSITIVE)
}

/// Staged tempering from the prior box to `exp(−L(ψ))`. With evidences, the
/// stages run over the covariance coordinates with μ marginalized, then μ is
/// drawn from its Gaussian conditional for each final sample.
pub fn sample_hyper(
    evidences: &[DatasetEvidence],
    prior: &PriorBox,
    coords: &HyperCoords,
    opts: &TmcmcOptions,
    seed: u64,
) -> Result<HyperSampleSet> {
    let ns = opts.samples;
    if ns < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 samples, got {ns}")));
    }
    if prior.len() != coords.len() {
        return Err(Error::Dimension(format!(
            "prior box has {} coordinates, sampling needs {}",
            prior.len(),
            coords.len()
        )));
    }
    for ev in evidences {
        if ev.dim() != coords.dim() {
            return Err(Error::Dimension(format!("evidence {} has dimension {}", ev.dataset_id, ev.dim())));
        }
    }
    let d = coords.dim();
    // With data, μ is integrated out during tempering and drawn exactly at
    // the end; only the covariance coordinates are tempered.
    let collapse = !evidences.is_empty();
    let free: Vec<usize> = prior.free().into_iter().filter(|&i| !collapse || i >= d).collect();
    let target = |x: &DVector<f64>| -> f64 {
        if collapse {
            mu_conditional(evidences, coords, prior, x).map_or(f64::NEG_INFINITY, |c| c.log_marginal)
        } else {
            log_likelihood(evidences, coords, x)
        }
    };
    let midpoint = prior.midpoint();

    let initial: Vec<(DVector<f64>, f64)> = (0..ns)
        .into_par_iter()
        .map(|i| {
            let mut rng = stage_rng(seed, 0, i);
            let mut x = prior.draw(&mut rng);
            for _ in 0..1000 {
                if coords.decode(&x).is_some() {
                    break;
                }
                x = prior.draw(&mut rng);
            }
            if collapse {
                x.rows_mut(0, d).copy_from(&midpoint.rows(0, d));
            }
            let l = target(&x);
            (x, l)
        })
        .collect();
    let (mut xs, mut ls): (Vec<DVector<f64>>, Vec<f64>) = initial.into_iter().unzip();
    if ls.iter().all(|l| !l.is_finite()) {
        return Err(Error::DegenerateStage);
    }

    let mut p = 0.0;
    let mut exponents = vec![0.0];
    let mut acceptance = Vec::new();
    let mut log_evidence = 0.0;
    let mut stage = 0;
    while p < 1.0 {
        stage += 1;
        if stage > opts.max_stages {
            return Err(Error::NotConverged {
                iterations: opts.max_stages,
                objective: p,
            });
        }
        let delta = next_increment(&ls, p, opts.cov_target);
        let p_next = if delta >= 1.0 - p { 1.0 } else { p + delta };
        let dp = p_next - p;
        let l_max = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = ls.iter().map(|&l| (dp * (l - l_max)).exp()).collect();
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::DegenerateStage);
        }
        log_evidence += (sum / ns as f64).ln() + dp * l_max;
        let w: Vec<f64> = raw.iter().map(|v| v / sum).collect();

        let (_, cov) = weighted_moments(&xs, &w);
        let k = free.len();
        let prop = DMatrix::from_fn(k, k, |a, b| cov[(free[a], free[b])] * opts.beta * opts.beta);
        let root = match cholesky_jittered(&prop, "proposal covariance") {
            Ok(c) => c.l(),
            Err(_) => DMatrix::from_diagonal(&prop.diagonal().map(|v| v.max(0.0).sqrt())),
        };

        let mut rng = stage_rng(seed, stage, usize::MAX >> 32);
        let cumulative: Vec<f64> = w
            .iter()
            .scan(0.0, |acc, &v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let picks: Vec<usize> = (0..ns)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * cumulative[ns - 1];
                cumulative.partition_point(|&c| c < u).min(ns - 1)
            })
            .collect();

        let moved: Vec<(DVector<f64>, f64, usize)> = picks
            .par_iter()
            .enumerate()
            .map(|(chain, &start)| {
                let mut rng = stage_rng(seed, stage, chain);
                let mut x = xs[start].clone();
                let mut l = ls[start];
                let mut accepted = 0;
                for _ in 0..opts.mh_steps {
                    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let step = &root * z;
                    let mut y = x.clone();
                    for (a, &i) in free.iter().enumerate() {
                        y[i] += step[a];
                    }
                    let u: f64 = rng.random();
                    if !prior.contains(&y) {
                        continue;
                    }
                    let ly = target(&y);
                    if ly.is_finite() && u.ln() < p_next * (ly - l) {
                        x = y;
                        l = ly;
                        accepted += 1;
                    }
                }
                (x, l, accepted)
            })
            .collect();
        let total_accepted: usize = moved.iter().map(|m| m.2).sum();
        acceptance.push(total_accepted as f64 / (ns * opts.mh_steps.max(1)) as f64);
        xs = moved.iter().map(|m| m.0.clone()).collect();
        ls = moved.iter().map(|m| m.1).collect();
        exponents.push(p_next);
        log::debug!("TMCMC stage {stage}: p = {p_next:.3e}, acceptance {:.2}", acceptance[stage - 1]);
        p = p_next;
    }

    if collapse {
        let drawn: Vec<Option<(DVector<f64>, f64)>> = xs
            .par_iter()
            .enumerate()
            .map(|(chain, x)| {
                let mut rng = stage_rng(seed, stage + 1, chain);
                let cond = mu_conditional(evidences, coords, prior, x)?;
                let mut y = x.clone();
                y.rows_mut(0, d).copy_from(&draw_mu(&cond, prior, &mut rng)?);
                let l = log_likelihood(evidences, coords, &y);
                Some((y, l))
            })
            .collect();
        let drawn: Vec<(DVector<f64>, f64)> = drawn.into_iter().collect::<Option<_>>().ok_or_else(|| {
            Error::InvalidInput("the prior box on μ excludes the conditional posterior of μ".into())
        })?;
        (xs, ls) = drawn.into_iter().unzip();
    }
    let hypers: Vec<HyperParams> = xs
        .iter()
        .map(|x| coords.decode(x).ok_or(Error::DegenerateStage))
        .collect::<Result<_>>()?;
    Ok(HyperSampleSet {
        coords_samples: xs,
        hypers,
        log_target_values: ls,
        stage_exponents: exponents,
        rng_seed: seed,
        log_evidence,
        acceptance,
        coords: coords.clone(),
    })
}

/// Equally weighted Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub components: Vec<Gaussian>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn uniform(components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("empty mixture".into()));
        }
        let w = 1.0 / components.len() as f64;
        let weights = vec![w; components.len()];
        Ok(GaussianMixture { components, weights })
    }

    /// Law of total mean and covariance over the components.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.components[0].dim();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for (g, &w) in self.components.iter().zip(&self.weights) {
            mean.axpy(w, g.mean(), 1.0);
            second += (g.cov() + g.mean() * g.mean().transpose()) * w;
        }
        let cov = symmetrize(&(second - &mean * mean.transpose()));
        (mean, cov)
    }

    /// Weighted mean of the component covariances.
    pub fn mean_component_cov(&self) -> DMatrix<f64> {
        let d = self.components[0].dim();
        self.components
            .iter()
            .zip(&self.weights)
            .fold(DMatrix::zeros(d, d), |a, (g, &w)| a + g.cov() * w)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (g, &w) in self.components.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return g.sample(rng);
            }
        }
        self.components[self.components.len() - 1].sample(rng)
    }
}

/// Mixture with its exact moments.
#[derive(Debug, Clone)]
pub struct MixtureSummary {
    pub mixture: GaussianMixture,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn summarize(components: Vec<Gaussian>) -> Result<MixtureSummary> {
    let mixture = GaussianMixture::uniform(components)?;
    let (mean, cov) = mixture.moments();
    Ok(MixtureSummary { mixture, mean, cov })
}

fn psd_component(mean: DVector<f64>, cov: DMatrix<f64>, scale: f64) -> Result<Gaussian> {
    let cov = symmetrize(&cov);
    if is_psd(&cov) {
        return Gaussian::new(mean, cov);
    }
    let clipped = clip_negative_eigenvalues(&cov);
    if (&clipped - &cov).norm() <= 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Gaussian::new(mean, clipped);
    }
    Err(Error::NotPositiveDefinite("mixture component covariance".into()))
}

/// Components `N(λ̂_r + K(μ − λ̂_r), Σ̂_r − KΣ̂_r)`, one per ψ sample.
pub fn mixture_conditional(samples: &[HyperParams], evidence: &DatasetEvidence) -> Result<MixtureSummary> {
    let components = samples
        .iter()
        .map(|psi| {
            let k = gain_matrix(evidence.cov(), &psi.cov)?;
            let mean = evidence.lambda_hat() + &k * (&psi.mu - evidence.lambda_hat());
            let cov = gain_posterior_cov(evidence.cov(), &psi.cov, &k);
            psd_component(mean, cov, evidence.cov().norm())
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(components)
}

/// Components `N(μ, Σ)`, one per ψ sample.
pub fn mixture_predictive(samples: &[HyperParams]) -> Result<MixtureSummary> {
    let components = samples
        .iter()
        .map(|psi| Gaussian::new(psi.mu.clone(), psi.cov.clone()))
        .collect::<Result<Vec<_>>>()?;
    summarize(components)
}

/// `ln Π_s N(μ_p | λ̂_{s,p}, σ²_p + σ̂²_{s,p})` inside the box, `−∞` outside.
/// Requires diagonal evidence covariances.
pub fn diagonal_pairwise_target(
    evidences: &[DatasetEvidence],
    p: usize,
    mu_bounds: (f64, f64),
    var_bounds: (f64, f64),
) -> Result<impl Fn(f64, f64) -> f64> {
    let mut pairs = Vec::with_capacity(evidences.len());
    for ev in evidences {
        let c = ev.cov();
        if p >= ev.dim() {
            return Err(Error::Dimension(format!("coordinate {p} out of range")));
        }
        let tol = 1e-12 * c.trace().abs();
        let off = (0..c.nrows()).flat_map(|i| (0..c.ncols()).map(move |j| (i, j))).filter(|(i, j)| i != j);
        if off.clone().any(|(i, j)| c[(i, j)].abs() > tol) {
            return Err(Error::InvalidInput(format!("evidence {} has a non-diagonal covariance", ev.dataset_id)));
        }
        pairs.push((ev.lambda_hat()[p], c[(p, p)]));
    }
    Ok(move |mu: f64, var: f64| {
        if !(mu_bounds.0 < mu && mu < mu_bounds.1 && var_bounds.0 <= var && var <= var_bounds.1) {
            return f64::NEG_INFINITY;
        }
        pairs
            .iter()
            .map(|&(l, v)| {
                let s = var + v;
                -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (mu - l).powi(2) / s)
            })
            .sum()
    })
}
