//! Synthetic datasets drawn from a known hyper-distribution.
//!
//! Each dataset `s` gets its own RNG stream derived from `(seed, s)`, so any
//! dataset can be regenerated in isolation and in any order.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::evidence::DatasetEvidence;
use crate::hierarchical::HyperParams;
use crate::linalg::{psd_sqrt, symmetrize};
use crate::modal::{amplification, ModalParams};
use crate::spectral::{FftLine, FrequencyBand, ResponseOrder, TimeHistory};

/// How records are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthDomain {
    /// FFT lines drawn from the likelihood model and inverted to a record.
    Frequency,
    /// SDOF oscillator simulated in discrete time.
    Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScenario {
    pub true_hyper: HyperParams,
    pub channels: usize,
    pub samples: usize,
    pub dt: f64,
    pub order: ResponseOrder,
    pub s_range: (f64, f64),
    pub se_range: (f64, f64),
    pub datasets: usize,
    pub seed: u64,
    pub domain: SynthDomain,
}

impl SynthScenario {
    pub fn validate(&self) -> Result<()> {
        if self.true_hyper.dim() != self.channels + 2 {
            return Err(Error::Dimension(format!(
                "hyper-parameters have dimension {}, expected {} for {} channels",
                self.true_hyper.dim(),
                self.channels + 2,
                self.channels
            )));
        }
        if self.channels == 0 || self.samples < 2 || self.datasets == 0 {
            return Err(Error::InvalidInput("need channels ≥ 1, samples ≥ 2 and datasets ≥ 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid dt {}", self.dt)));
        }
        for (name, (lo, hi)) in [("S", self.s_range), ("Se", self.se_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidInput(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// RNG stream `stream` of dataset `s`.
    pub fn rng(&self, s: usize, stream: u64) -> ChaCha8Rng {
        dataset_rng(self.seed, s, stream)
    }
}

pub fn dataset_rng(seed: u64, s: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((s as u64) << 4 | stream);
    rng
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// True θ_s: `λ_s ~ N(μ, Σ)` with φ renormalized, `S`, `Se` uniform.
pub fn draw_dataset_params(sc: &SynthScenario, s: usize) -> Result<ModalParams> {
    sc.validate()?;
    let mut rng = sc.rng(s, 0);
    let root = psd_sqrt(&sc.true_hyper.cov);
    let d = sc.true_hyper.dim();
    for _ in 0..100 {
        let lambda = &sc.true_hyper.mu + &root * normals(&mut rng, d);
        let phi = lambda.rows(2, d - 2).into_owned();
        if lambda[0] > 0.0 && lambda[1] > 0.0 && phi.norm() > 0.0 {
            let s_val = uniform(&mut rng, sc.s_range);
            let se_val = uniform(&mut rng, sc.se_range);
            return ModalParams::new(lambda[0], lambda[1], phi, s_val, se_val);
        }
    }
    Err(Error::InvalidInput(format!(
        "dataset {s}: 100 draws of (f, ξ) were not positive; scenario is badly specified"
    )))
}

/// Frequencies `k/(NΔt)` inside `band`, `k = 1 … ⌊N/2⌋−1`.
pub fn band_grid(band: &FrequencyBand, samples: usize, dt: f64) -> Vec<f64> {
    let df = 1.0 / (samples as f64 * dt);
    (1..samples / 2).map(|k| k as f64 * df).filter(|&f| band.contains(f)).collect()
}

/// Symmetric root of `E_k/2`, closed form for the rank-one-plus-identity structure.
fn half_psd_root(theta: &ModalParams, f_k: f64, order: ResponseOrder) -> DMatrix<f64> {
    let n = theta.channels();
    let sd = theta.s * amplification(f_k, theta.f, theta.xi, order);
    let pp = &theta.phi * theta.phi.transpose();
    let a = (theta.se / 2.0).sqrt();
    let b = ((theta.se + sd) / 2.0).sqrt();
    (DMatrix::identity(n, n) - &pp) * a + pp * b
}

/// Circularly-symmetric complex Gaussian lines with covariance `E_k(θ)`.
pub fn generate_fft_band<R: Rng + ?Sized>(theta: &ModalParams, freqs: &[f64], order: ResponseOrder, rng: &mut R) -> Vec<FftLine> {
    let n = theta.channels();
    freqs
        .iter()
        .map(|&f_k| {
            let root = half_psd_root(theta, f_k, order);
            let a = &root * normals(rng, n);
            let b = &root * normals(rng, n);
            FftLine {
                freq: f_k,
                values: DVector::from_fn(n, |i, _| Complex64::new(a[i], b[i])),
            }
        })
        .collect()
}

/// Record whose scaled FFT lines are exact draws from the model at every
/// `k = 1 … ⌊N/2⌋−1`; DC and Nyquist bins are zero.
pub fn generate_record_frequency<R: Rng + ?Sized>(theta: &ModalParams, sc: &SynthScenario, rng: &mut R) -> Result<TimeHistory> {
    let n = sc.samples;
    let df = 1.0 / (n as f64 * sc.dt);
    let freqs: Vec<f64> = (1..n / 2).map(|k| k as f64 * df).collect();
    let lines = generate_fft_band(theta, &freqs, sc.order, rng);
    let unscale = (n as f64 / sc.dt).sqrt();
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut samples = DMatrix::zeros(theta.channels(), n);
    for ch in 0..theta.channels() {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (i, line) in lines.iter().enumerate() {
            let k = i + 1;
            let x = line.values[ch] * unscale;
            buf[k] = x;
            buf[n - k] = x.conj();
        }
        ifft.process(&mut buf);
        for j in 0..n {
            samples[(ch, j)] = buf[j].re / n as f64;
        }
    }
    TimeHistory::new(samples, sc.dt, sc.order)
}

/// SDOF pseudo-acceleration `ω²x` driven by white noise of intensity `S`,
/// spread by `φ`, plus white measurement noise of variance `Se/Δt`.
/// Exact discrete-time transition and process-noise covariance.
pub fn generate_time_history<R: Rng + ?Sized>(theta: &ModalParams, sc: &SynthScenario, rng: &mut R) -> Result<TimeHistory> {
    if sc.order != ResponseOrder::Acceleration {
        return Err(Error::InvalidInput("time-domain synthesis supports acceleration records only".into()));
    }
    let w = 2.0 * std::f64::consts::PI * theta.f;
    let dt = sc.dt;
    if w * dt >= std::f64::consts::PI {
        return Err(Error::InvalidInput(format!(
            "natural frequency {} Hz is above Nyquist for dt = {dt}",
            theta.f
        )));
    }
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -w * w, -2.0 * theta.xi * w]);
    let mut m = DMatrix::zeros(4, 4);
    m.view_mut((0, 0), (2, 2)).copy_from(&(-&a * dt));
    m[(1, 3)] = theta.s * dt;
    m.view_mut((2, 2), (2, 2)).copy_from(&(a.transpose() * dt));
    let e = m.exp();
    let phi_d = e.view((2, 2), (2, 2)).transpose();
    let q_d = symmetrize(&(&phi_d * e.view((0, 2), (2, 2))));
    if phi_d.iter().chain(q_d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("unstable discretization".into()));
    }
    // stationary covariance P = Φ P Φᵀ + Q by doubling
    let mut p = q_d.clone();
    let mut pk = phi_d.clone();
    for _ in 0..60 {
        p = symmetrize(&(&p + &pk * &p * pk.transpose()));
        pk = &pk * &pk;
        if pk.norm() < 1e-300 {
            break;
        }
    }
    let root_p = psd_sqrt(&p);
    let root_q = psd_sqrt(&q_d);
    let noise_sd = (theta.se / dt).sqrt();
    let mut z = &root_p * normals(rng, 2);
    let mut samples = DMatrix::zeros(theta.channels(), sc.samples);
    for j in 0..sc.samples {
        let y = w * w * z[0];
        for ch in 0..theta.channels() {
            let e: f64 = rng.sample(StandardNormal);
            samples[(ch, j)] = theta.phi[ch] * y + noise_sd * e;
        }
        z = &phi_d * z + &root_q * normals(rng, 2);
    }
    TimeHistory::new(samples, dt, sc.order)
}

/// True parameters and record of dataset `s`.
pub fn generate_dataset(sc: &SynthScenario, s: usize) -> Result<(ModalParams, TimeHistory)> {
    let theta = draw_dataset_params(sc, s)?;
    let mut rng = sc.rng(s, 1);
    let th = match sc.domain {
        SynthDomain::Frequency => generate_record_frequency(&theta, sc, &mut rng)?,
        SynthDomain::Time => generate_time_history(&theta, sc, &mut rng)?,
    };
    Ok((theta, th))
}

/// True parameters and band lines of dataset `s`, drawn directly in the
/// frequency domain.
pub fn generate_band_dataset(sc: &SynthScenario, s: usize, freqs: &[f64]) -> Result<(ModalParams, Vec<FftLine>)> {
    let theta = draw_dataset_params(sc, s)?;
    let mut rng = sc.rng(s, 2);
    let lines = generate_fft_band(&theta, freqs, sc.order, &mut rng);
    Ok((theta, lines))
}

/// Evidence drawn around a true `λ = (f, ξ, φ)` with standard deviations
/// `(sd_f, sd_xi, sd_phi)`; the mode-shape block is isotropic in the plane
/// orthogonal to the drawn shape.
pub fn draw_evidence<R: Rng + ?Sized>(id: &str, lambda: &DVector<f64>, sd: (f64, f64, f64), rng: &mut R) -> Result<DatasetEvidence> {
    let d = lambda.len();
    let n = d - 2;
    let phi = lambda.rows(2, n).normalize();
    let proj = |p: &DVector<f64>| DMatrix::identity(n, n) - p * p.transpose();
    let mut hat = lambda.clone();
    hat[0] += sd.0 * rng.sample::<f64, _>(StandardNormal);
    hat[1] += sd.1 * rng.sample::<f64, _>(StandardNormal);
    let dphi = proj(&phi) * normals(rng, n) * sd.2;
    let phi_hat = (&phi + dphi).normalize();
    hat.rows_mut(2, n).copy_from(&phi_hat);
    let mut cov = DMatrix::zeros(d, d);
    cov[(0, 0)] = sd.0 * sd.0;
    cov[(1, 1)] = sd.1 * sd.1;
    cov.view_mut((2, 2), (n, n)).copy_from(&(proj(&phi_hat) * sd.2 * sd.2));
    DatasetEvidence::new(id, hat, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::psd_model;
    use crate::spectral::{band_select, scaled_fft};

    fn scenario(cov_scale: f64) -> SynthScenario {
        let mu = DVector::from_vec(vec![4.2, 0.02, 0.6, 0.8]);
        let mut cov = DMatrix::zeros(4, 4);
        cov[(0, 0)] = cov_scale * 0.035f64.powi(2);
        cov[(1, 1)] = cov_scale * 0.002f64.powi(2);
        SynthScenario {
            true_hyper: HyperParams::new(mu, cov).unwrap(),
            channels: 2,
            samples: 2048,
            dt: 0.02,
            order: ResponseOrder::Acceleration,
            s_range: (1.0, 2.0),
            se_range: (0.01, 0.02),
            datasets: 4,
            seed: 17,
            domain: SynthDomain::Frequency,
        }
    }

    #[test]
    fn zero_hyper_covariance_repeats_the_mean() {
        let sc = scenario(0.0);
        for s in 0..5 {
            let th = draw_dataset_params(&sc, s).unwrap();
            assert_eq!(th.f, 4.2);
            assert_eq!(th.xi, 0.02);
            assert!((th.phi.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let sc = scenario(1.0);
        assert_eq!(draw_dataset_params(&sc, 3).unwrap(), draw_dataset_params(&sc, 3).unwrap());
        assert_ne!(draw_dataset_params(&sc, 3).unwrap(), draw_dataset_params(&sc, 4).unwrap());
        let a = generate_dataset(&sc, 1).unwrap().1;
        let b = generate_dataset(&sc, 1).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn frequency_record_reproduces_its_lines() {
        let sc = scenario(1.0);
        let theta = draw_dataset_params(&sc, 0).unwrap();
        let mut rng = sc.rng(0, 1);
        let th = generate_record_frequency(&theta, &sc, &mut rng).unwrap();
        let mut rng = sc.rng(0, 1);
        let df = 1.0 / (sc.samples as f64 * sc.dt);
        let freqs: Vec<f64> = (1..sc.samples / 2).map(|k| k as f64 * df).collect();
        let expected = generate_fft_band(&theta, &freqs, sc.order, &mut rng);
        let got = scaled_fft(&th);
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            assert!((&g.values - &e.values).norm() < 1e-9 * (1.0 + e.values.norm()));
        }
    }

    #[test]
    fn zero_power_gives_zero_lines() {
        let theta = ModalParams::new(3.0, 0.02, DVector::from_vec(vec![1.0, 0.0]), 0.0, 0.0).unwrap();
        let mut rng = dataset_rng(1, 0, 0);
        let lines = generate_fft_band(&theta, &[2.9, 3.0, 3.1], ResponseOrder::Acceleration, &mut rng);
        assert!(lines.iter().all(|l| l.values.norm() == 0.0));
    }

    #[test]
    fn half_root_squares_to_half_psd() {
        let theta = ModalParams::new(3.0, 0.02, DVector::from_vec(vec![0.3, 0.4, 0.5]), 2.0, 0.1).unwrap();
        let r = half_psd_root(&theta, 3.05, ResponseOrder::Velocity);
        let e = psd_model(&theta, 3.05, ResponseOrder::Velocity);
        assert!((&r * &r - e * 0.5).norm() < 1e-10);
    }

    #[test]
    fn time_domain_silence_is_zero() {
        let mut sc = scenario(0.0);
        sc.domain = SynthDomain::Time;
        let theta = ModalParams::new(4.2, 0.02, DVector::from_vec(vec![0.6, 0.8]), 0.0, 0.0).unwrap();
        let mut rng = sc.rng(0, 1);
        let th = generate_time_history(&theta, &sc, &mut rng).unwrap();
        assert!(th.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_domain_spectrum_matches_model_level() {
        let mut sc = scenario(0.0);
        sc.domain = SynthDomain::Time;
        sc.samples = 1 << 15;
        sc.dt = 0.01;
        let theta = ModalParams::new(4.2, 0.02, DVector::from_vec(vec![0.6, 0.8]), 1.0, 0.01).unwrap();
        let band = FrequencyBand::new(3.8, 4.6).unwrap();
        let mut ratios = Vec::new();
        for s in 0..8 {
            let mut rng = sc.rng(s, 1);
            let th = generate_time_history(&theta, &sc, &mut rng).unwrap();
            let lines = band_select(&scaled_fft(&th), &band).unwrap();
            let observed: f64 = lines.iter().map(|l| l.values.norm_squared()).sum();
            let expected: f64 = lines.iter().map(|l| psd_model(&theta, l.freq, sc.order).trace()).sum();
            ratios.push(observed / expected);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "{ratios:?}");
    }

    #[test]
    fn drawn_evidence_is_valid() {
        let lambda = DVector::from_vec(vec![4.2, 0.02, 0.6, 0.8]);
        let mut rng = dataset_rng(3, 0, 0);
        let ev = draw_evidence("x", &lambda, (0.01, 0.003, 0.02), &mut rng).unwrap();
        assert!((ev.phi().norm() - 1.0).abs() < 1e-12);
        assert!((ev.cov().view((2, 2), (2, 2)) * ev.phi()).norm() < 1e-12);
    }
}
