//! Scaled FFT of multi-channel records, band selection, and the averaged
//! singular-value spectrum used to pick resonance bands.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Response quantity measured by a record; sets the exponent of `(2πi f)^{-q}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ResponseOrder {
    Acceleration = 0,
    Velocity = 1,
    Displacement = 2,
}

impl ResponseOrder {
    pub fn q(self) -> i32 {
        self as i32
    }
}

impl From<ResponseOrder> for u8 {
    fn from(q: ResponseOrder) -> u8 {
        q as u8
    }
}

impl TryFrom<u8> for ResponseOrder {
    type Error = Error;
    fn try_from(q: u8) -> Result<Self> {
        match q {
            0 => Ok(ResponseOrder::Acceleration),
            1 => Ok(ResponseOrder::Velocity),
            2 => Ok(ResponseOrder::Displacement),
            _ => Err(Error::InvalidInput(format!("response order q must be 0, 1 or 2, got {q}"))),
        }
    }
}

/// Multi-channel sampled record: `samples` is channels × time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeHistory {
    samples: DMatrix<f64>,
    dt: f64,
    order: ResponseOrder,
}

impl TimeHistory {
    pub fn new(samples: DMatrix<f64>, dt: f64, order: ResponseOrder) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidInput(format!("sampling interval must be > 0, got {dt}")));
        }
        if samples.nrows() < 1 {
            return Err(Error::InvalidInput("record has no channels".into()));
        }
        if samples.ncols() < 2 {
            return Err(Error::InvalidInput("record needs at least 2 time steps".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("record contains non-finite samples".into()));
        }
        Ok(TimeHistory { samples, dt, order })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn order(&self) -> ResponseOrder {
        self.order
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.dt
    }

    /// Copy with each channel's mean subtracted.
    pub fn demeaned(&self) -> TimeHistory {
        let mut s = self.samples.clone();
        for mut row in s.row_iter_mut() {
            let m = row.mean();
            row.add_scalar_mut(-m);
        }
        TimeHistory {
            samples: s,
            dt: self.dt,
            order: self.order,
        }
    }

    /// Copy keeping only the first `n` time steps.
    pub fn truncated(&self, n: usize) -> TimeHistory {
        TimeHistory {
            samples: self.samples.columns(0, n.min(self.len())).into_owned(),
            dt: self.dt,
            order: self.order,
        }
    }
}

/// One scaled FFT line: frequency in Hz and the complex n-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FftLine {
    pub freq: f64,
    pub values: DVector<Complex64>,
}

impl FftLine {
    pub fn channels(&self) -> usize {
        self.values.len()
    }
}

/// Closed frequency interval `[f_lb, f_ub]` in Hz.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrequencyBand {
    pub f_lb: f64,
    pub f_ub: f64,
}

impl FrequencyBand {
    pub fn new(f_lb: f64, f_ub: f64) -> Result<Self> {
        if !(f_lb.is_finite() && f_ub.is_finite() && f_lb > 0.0 && f_lb < f_ub) {
            return Err(Error::InvalidInput(format!("invalid band [{f_lb}, {f_ub}]")));
        }
        Ok(FrequencyBand { f_lb, f_ub })
    }

    pub fn contains(&self, f: f64) -> bool {
        self.f_lb <= f && f <= self.f_ub
    }

    pub fn overlaps(&self, other: &FrequencyBand) -> bool {
        self.f_lb <= other.f_ub && other.f_lb <= self.f_ub
    }
}

/// Scaled FFT `F̂_k = √(Δt/N) Σ_j ŷ_j e^{−2πijk/N}` at `f_k = k/(NΔt)` for
/// `k = 1 … ⌊N/2⌋ − 1` (DC and Nyquist excluded). No windowing or detrending.
pub fn scaled_fft(th: &TimeHistory) -> Vec<FftLine> {
    let n = th.len();
    let ch = th.channels();
    let nq = n / 2;
    if nq < 2 {
        return Vec::new();
    }
    let scale = (th.dt / n as f64).sqrt();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut spectra: Vec<Vec<Complex64>> = Vec::with_capacity(ch);
    for row in th.samples.row_iter() {
        let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        spectra.push(buf);
    }
    let df = 1.0 / (n as f64 * th.dt);
    (1..nq)
        .map(|k| FftLine {
            freq: k as f64 * df,
            values: DVector::from_iterator(ch, spectra.iter().map(|s| s[k] * scale)),
        })
        .collect()
}

/// Lines with `f_lb ≤ f_k ≤ f_ub`, in order.
pub fn band_select(lines: &[FftLine], band: &FrequencyBand) -> Result<Vec<FftLine>> {
    let out: Vec<FftLine> = lines.iter().filter(|l| band.contains(l.freq)).cloned().collect();
    if out.is_empty() {
        return Err(Error::EmptyBand {
            f_lb: band.f_lb,
            f_ub: band.f_ub,
        });
    }
    Ok(out)
}

/// Per-frequency singular values (descending) of a PSD matrix estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularValueSpectrum {
    pub freqs: Vec<f64>,
    /// `values[k]` holds the n singular values at `freqs[k]`, descending.
    pub values: Vec<Vec<f64>>,
}

impl SingularValueSpectrum {
    pub fn channels(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Index of the bin where the largest singular value peaks.
    pub fn peak_index(&self) -> Option<usize> {
        (0..self.values.len()).max_by(|&a, &b| self.values[a][0].total_cmp(&self.values[b][0]))
    }
}

/// Singular values of `(1/N_D) Σ_s F̂_{k,s} F̂_{k,s}^*` per bin, records
/// truncated to the shortest length.
pub fn singular_value_spectrum(datasets: &[TimeHistory]) -> Result<SingularValueSpectrum> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidInput("no datasets for the singular value spectrum".into()))?;
    let n_ch = first.channels();
    for th in datasets {
        if th.channels() != n_ch {
            return Err(Error::Dimension(format!(
                "datasets have {} and {} channels",
                n_ch,
                th.channels()
            )));
        }
        if th.dt() != first.dt() {
            return Err(Error::InvalidInput(format!(
                "datasets have sampling intervals {} and {}",
                first.dt(),
                th.dt()
            )));
        }
    }
    let n_min = datasets.iter().map(TimeHistory::len).min().unwrap_or(0);
    let ffts: Vec<Vec<FftLine>> = datasets.iter().map(|th| scaled_fft(&th.truncated(n_min))).collect();
    let n_lines = ffts[0].len();
    let nd = datasets.len() as f64;
    let mut freqs = Vec::with_capacity(n_lines);
    let mut values = Vec::with_capacity(n_lines);
    for k in 0..n_lines {
        let mut psd = DMatrix::<Complex64>::zeros(n_ch, n_ch);
        for lines in &ffts {
            let f = &lines[k].values;
            psd += f * f.adjoint();
        }
        psd /= Complex64::new(nd, 0.0);
        let mut sv: Vec<f64> = if n_ch == 1 {
            vec![psd[(0, 0)].re]
        } else {
            // Hermitian PSD: singular values are the eigenvalues
            let herm = (&psd + psd.adjoint()) * Complex64::new(0.5, 0.0);
            SymmetricEigen::new(herm).eigenvalues.iter().map(|&l| l.max(0.0)).collect()
        };
        sv.sort_by(|a, b| b.total_cmp(a));
        freqs.push(ffts[0][k].freq);
        values.push(sv);
    }
    Ok(SingularValueSpectrum { freqs, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(rows: Vec<Vec<f64>>, dt: f64) -> TimeHistory {
        let n = rows[0].len();
        let m = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        TimeHistory::new(m, dt, ResponseOrder::Acceleration).unwrap()
    }

    #[test]
    fn zero_signal_gives_zero_lines() {
        let th = record(vec![vec![0.0; 64]], 0.01);
        let lines = scaled_fft(&th);
        assert_eq!(lines.len(), 31);
        assert!(lines.iter().all(|l| l.values[0].norm() == 0.0));
    }

    #[test]
    fn on_bin_cosine() {
        let (n, dt, m) = (1024usize, 0.01, 37usize);
        let f0 = m as f64 / (n as f64 * dt);
        let y: Vec<f64> = (0..n).map(|j| (2.0 * std::f64::consts::PI * f0 * j as f64 * dt).cos()).collect();
        let lines = scaled_fft(&record(vec![y], dt));
        let expect = (dt * n as f64).sqrt() / 2.0;
        for (i, l) in lines.iter().enumerate() {
            let k = i + 1;
            if k == m {
                assert!((l.values[0].norm() - expect).abs() < 1e-10);
            } else {
                assert!(l.values[0].norm() < 1e-10, "bin {k}: {}", l.values[0].norm());
            }
        }
    }

    #[test]
    fn band_counts_inclusive_endpoints() {
        // N = 12000, Δt = 0.005 → spacing 1/60 Hz; k = 192..=312 lie in [3.2, 5.2]
        let th = record(vec![vec![0.0; 12000]], 0.005);
        let lines = scaled_fft(&th);
        let band = FrequencyBand::new(3.2, 5.2).unwrap();
        let sel = band_select(&lines, &band).unwrap();
        let oracle = (1..6000).filter(|&k| (3.2..=5.2).contains(&(k as f64 / 60.0))).count();
        assert_eq!(sel.len(), oracle);
        assert_eq!(sel.len(), 121);
    }

    #[test]
    fn band_above_nyquist_is_empty() {
        let th = record(vec![vec![1.0; 100]], 0.01);
        let lines = scaled_fft(&th);
        let band = FrequencyBand::new(60.0, 70.0).unwrap();
        assert!(matches!(band_select(&lines, &band), Err(Error::EmptyBand { .. })));
    }

    #[test]
    fn full_band_keeps_all() {
        let th = record(vec![(0..100).map(|j| (j as f64).sin()).collect()], 0.01);
        let lines = scaled_fft(&th);
        let band = FrequencyBand::new(1e-9, th.nyquist()).unwrap();
        assert_eq!(band_select(&lines, &band).unwrap(), lines);
    }

    #[test]
    fn svd_spectrum_single_channel_is_periodogram() {
        let th = record(vec![(0..128).map(|j| ((j * 7 % 13) as f64) - 6.0).collect()], 0.02);
        let sv = singular_value_spectrum(std::slice::from_ref(&th)).unwrap();
        let lines = scaled_fft(&th);
        for (k, l) in lines.iter().enumerate() {
            assert!((sv.values[k][0] - l.values[0].norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_spectrum_errors() {
        assert!(singular_value_spectrum(&[]).is_err());
        let a = record(vec![vec![0.0; 16]], 0.1);
        let b = record(vec![vec![0.0; 16], vec![0.0; 16]], 0.1);
        assert!(matches!(singular_value_spectrum(&[a, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn time_history_validation() {
        assert!(TimeHistory::new(DMatrix::zeros(1, 1), 0.1, ResponseOrder::Velocity).is_err());
        assert!(TimeHistory::new(DMatrix::zeros(1, 4), 0.0, ResponseOrder::Velocity).is_err());
        let mut m = DMatrix::zeros(1, 4);
        m[(0, 2)] = f64::NAN;
        assert!(TimeHistory::new(m, 0.1, ResponseOrder::Velocity).is_err());
    }
}
