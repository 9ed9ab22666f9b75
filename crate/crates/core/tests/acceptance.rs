//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances and time budgets are pinned below.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use hbmodal::evidence::DatasetEvidence;
use hbmodal::gaussian::{cholesky_from_correlation, convolve_evidence, product_factorize, CorrelationSpec, Gaussian};
use hbmodal::hierarchical::{
    self, hyper_gradient_packed, hyper_hessian, hyper_nll, mu_weights, HyperFit, HyperParams, HyperPosteriorLaplace,
    HyperPrior,
};
use hbmodal::modal::{identify, nll, Band, ModalParams};
use hbmodal::spectral::{FftLine, FrequencyBand, ResponseOrder};
use hbmodal::synth::{band_grid, dataset_rng, draw_evidence, generate_band_dataset, generate_fft_band, SynthDomain, SynthScenario};
use hbmodal::tmcmc::{mixture_conditional, mixture_predictive, sample_hyper, GaussianMixture, HyperCoords, PriorBox, TmcmcOptions};

type Check = Result<(bool, String), String>;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let eig = DVector::from_fn(d, |_, _| rng.random_range(lo..hi));
    let m = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Log-density through an explicit inverse and LU determinant.
fn log_normal_explicit(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let inv = cov.clone().try_inverse().expect("invertible");
    let r = x - mean;
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
}

/// `x ↦ N(x | mean, cov)` with the explicit inverse and determinant computed once.
fn normal_density_explicit(mean: &DVector<f64>, cov: &DMatrix<f64>) -> impl Fn(&DVector<f64>) -> f64 {
    let d = mean.len() as f64;
    let inv = cov.clone().try_inverse().expect("invertible");
    let norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln());
    let mean = mean.clone();
    move |x| {
        let r = x - &mean;
        (norm - 0.5 * r.dot(&(&inv * &r))).exp()
    }
}

/// Probabilists' Gauss–Hermite rule by Golub–Welsch; weights sum to one.
fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(m, m, |a, b| if a + 1 == b || b + 1 == a { (a.max(b) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(j);
    let nodes = eig.eigenvalues.iter().cloned().collect();
    let weights = (0..m).map(|k| eig.eigenvectors[(0, k)].powi(2)).collect();
    (nodes, weights)
}

/// `E_{x ~ N(mean, cov)} f(x)` by tensor-product Gauss–Hermite.
fn expect_gh(mean: &DVector<f64>, cov: &DMatrix<f64>, m: usize, f: impl Fn(&DVector<f64>) -> f64) -> f64 {
    let d = mean.len();
    let l = cov.clone().cholesky().expect("SPD").l();
    let (nodes, weights) = gauss_hermite(m);
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let z = DVector::from_fn(d, |i, _| nodes[idx[i]]);
        let w: f64 = idx.iter().map(|&k| weights[k]).product();
        total += w * f(&(mean + &l * z));
        let mut i = 0;
        loop {
            if i == d {
                return total;
            }
            idx[i] += 1;
            if idx[i] < m {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_fact, mut worst_conv) = (0.0f64, 0.0f64);
    for inst in 0..1000 {
        let d = 1 + inst % 5;
        let s0 = random_spd(&mut rng, d, 0.5, 2.0);
        let s = random_spd(&mut rng, d, 0.5, 2.0);
        let m0 = normals(&mut rng, d);
        let m = normals(&mut rng, d);
        let g0 = Gaussian::new(m0.clone(), s0.clone()).map_err(|e| e.to_string())?;
        let g = Gaussian::new(m.clone(), s.clone()).map_err(|e| e.to_string())?;
        let fac = product_factorize(&g0, &g).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let x = &m0 + normals(&mut rng, d);
            let lhs = log_normal_explicit(&x, &m0, &s0) + log_normal_explicit(&x, &m, &s);
            let rhs = fac.log_evidence + fac.posterior.log_pdf(&x).map_err(|e| e.to_string())?;
            worst_fact = worst_fact.max(((rhs - lhs).exp() - 1.0).abs());
        }
        // the weight is the narrower factor so the quadrature converges fast
        let wide = &s0 * 2.0 + random_spd(&mut rng, d, 0.5, 2.0);
        let mu = &m0 + normals(&mut rng, d) * 0.5;
        let nodes = if d <= 3 { 10 } else { 8 };
        let quad = expect_gh(&m0, &s0, nodes, normal_density_explicit(&mu, &wide));
        let closed = convolve_evidence(&m0, &s0, &wide, &mu).map_err(|e| e.to_string())?;
        worst_conv = worst_conv.max((closed / quad - 1.0).abs());
    }
    Ok((
        worst_fact < 1e-10 && worst_conv < 1e-4,
        format!("factorization max rel err {worst_fact:.2e} (< 1e-10), convolution max rel err {worst_conv:.2e} (< 1e-4)"),
    ))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for inst in 0..1000 {
        let d = 1 + inst % 6;
        let c = random_spd(&mut rng, d, 0.05, 3.0);
        let r = DMatrix::from_fn(d, d, |i, j| c[(i, j)] / (c[(i, i)] * c[(j, j)]).sqrt());
        let rhos: Vec<f64> = (1..d).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
        let spec = CorrelationSpec::new(vec![1.0; d], rhos).map_err(|e| e.to_string())?;
        let l = cholesky_from_correlation(&spec).map_err(|e| e.to_string())?;
        let reference = r.cholesky().ok_or("reference Cholesky failed")?.l();
        worst = worst.max((l - reference).amax());
    }
    Ok((worst < 1e-12, format!("max elementwise diff {worst:.2e} (< 1e-12)")))
}

fn random_evidences(rng: &mut ChaCha8Rng, d: usize, nd: usize) -> Vec<DatasetEvidence> {
    (0..nd)
        .map(|s| {
            let l = normals(rng, d);
            DatasetEvidence::unconstrained(format!("{s}"), l, random_spd(rng, d, 0.1, 1.0)).unwrap()
        })
        .collect()
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_g, mut worst_h, mut worst_v) = (0.0f64, 0.0f64, 0.0f64);
    for d in 2..=4 {
        for nd in [2, 10] {
            for _ in 0..5 {
                let evs = random_evidences(&mut rng, d, nd);
                let psi = HyperParams::new(normals(&mut rng, d) * 0.5, random_spd(&mut rng, d, 0.2, 1.0)).unwrap();
                let explicit: f64 = evs
                    .iter()
                    .map(|e| {
                        -log_normal_explicit(&psi.mu, e.lambda_hat(), &(&psi.cov + e.cov()))
                            - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                    })
                    .sum();
                let value = hyper_nll(&psi, &evs).map_err(|e| e.to_string())?;
                worst_v = worst_v.max((value - explicit).abs() / explicit.abs().max(1.0));
                let x = psi.packed();
                let f = |v: &DVector<f64>| hyper_nll(&HyperParams::from_packed(d, v).unwrap(), &evs).unwrap();
                let g = |v: &DVector<f64>| hyper_gradient_packed(&HyperParams::from_packed(d, v).unwrap(), &evs).unwrap();
                let h_step = 1e-5;
                let mut g_fd = DVector::zeros(x.len());
                let mut h_fd = DMatrix::zeros(x.len(), x.len());
                for k in 0..x.len() {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[k] += h_step;
                    xm[k] -= h_step;
                    g_fd[k] = (f(&xp) - f(&xm)) / (2.0 * h_step);
                    h_fd.set_column(k, &((g(&xp) - g(&xm)) / (2.0 * h_step)));
                }
                let ga = g(&x);
                worst_g = worst_g.max((&ga - &g_fd).norm() / ga.norm());
                let ha = hyper_hessian(&psi, &evs).map_err(|e| e.to_string())?;
                let h_fd = (&h_fd + h_fd.transpose()) * 0.5;
                worst_h = worst_h.max((&ha - &h_fd).norm() / ha.norm());
            }
        }
    }
    Ok((
        worst_g < 1e-6 && worst_h < 1e-4 && worst_v < 1e-12,
        format!("gradient rel err {worst_g:.2e} (< 1e-6), Hessian rel err {worst_h:.2e} (< 1e-4), value vs explicit {worst_v:.2e}"),
    ))
}

/// Negative log-likelihood through complex Gaussian densities, line by line.
fn nll_oracle(theta: &ModalParams, lines: &[FftLine], order: ResponseOrder) -> f64 {
    let n = theta.channels();
    let q = order.q();
    let pp = &theta.phi * theta.phi.transpose();
    lines
        .iter()
        .map(|l| {
            let beta = l.freq / theta.f;
            let g = (1.0 - beta * beta).powi(2) + (2.0 * theta.xi * beta).powi(2);
            let c = (2.0 * std::f64::consts::PI * l.freq).powi(-2 * q);
            let e = &pp * (theta.s * c / g) + DMatrix::identity(n, n) * theta.se;
            // LU with partial pivoting; nalgebra's closed-form 4×4 inverse loses digits here.
            let lu = e.lu();
            let re = l.values.map(|z| z.re);
            let im = l.values.map(|z| z.im);
            let quad = re.dot(&lu.solve(&re).unwrap()) + im.dot(&lu.solve(&im).unwrap());
            n as f64 * std::f64::consts::PI.ln() + lu.determinant().ln() + quad
        })
        .sum()
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for inst in 0..1000 {
        let n = 1 + inst % 6;
        let order = ResponseOrder::try_from((inst % 3) as u8).unwrap();
        let theta = ModalParams::new(
            rng.random_range(1.0..10.0),
            rng.random_range(0.005..0.08),
            normals(&mut rng, n),
            rng.random_range(0.1..10.0),
            rng.random_range(0.01..1.0),
        )
        .map_err(|e| e.to_string())?;
        let lines: Vec<FftLine> = (0..rng.random_range(10..60))
            .map(|k| FftLine {
                freq: theta.f * (0.8 + 0.4 * k as f64 / 60.0),
                values: DVector::from_fn(n, |_, _| {
                    nalgebra::Complex::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                }),
            })
            .collect();
        let band = Band::new(&lines, order).map_err(|e| e.to_string())?;
        let fast = nll(&theta, &band).map_err(|e| e.to_string())?;
        let oracle = nll_oracle(&theta, &lines, order);
        worst = worst.max((fast - oracle).abs() / oracle.abs());
    }
    Ok((worst < 1e-10, format!("max rel err {worst:.2e} (< 1e-10)")))
}

fn criterion_5() -> Check {
    let band = FrequencyBand::new(3.2, 5.2).unwrap();
    let freqs: Vec<f64> = band_grid(&band, 6000, 0.01).into_iter().take(120).collect();
    if freqs.len() != 120 {
        return Err(format!("grid has {} lines", freqs.len()));
    }
    let truth = ModalParams::new(4.2, 0.05, DVector::from_vec(vec![0.370, 0.616, 0.696]), 1.0, 0.05).unwrap();
    let tv = truth.to_vector();
    let results: Vec<Result<Vec<bool>, String>> = (0..50)
        .into_par_iter()
        .map(|s| {
            let mut rng = dataset_rng(500, s, 1);
            let lines = generate_fft_band(&truth, &freqs, ResponseOrder::Acceleration, &mut rng);
            let band = Band::new(&lines, ResponseOrder::Acceleration).map_err(|e| e.to_string())?;
            let id = identify(&band).map_err(|e| e.to_string())?;
            let mut est = id.posterior.theta_hat.to_vector();
            if est.rows(2, 3).dot(&tv.rows(2, 3)) < 0.0 {
                let mut phi = est.rows_mut(2, 3);
                phi *= -1.0;
            }
            let sd = id.posterior.cov.diagonal().map(|v| v.max(0.0).sqrt());
            Ok((0..tv.len()).map(|i| (est[i] - tv[i]).abs() <= 3.0 * sd[i]).collect())
        })
        .collect();
    let hits: Vec<Vec<bool>> = results.into_iter().collect::<Result<_, _>>()?;
    let names = ["f", "xi", "phi_1", "phi_2", "phi_3", "S", "Se"];
    let rates: Vec<f64> = (0..tv.len()).map(|i| hits.iter().filter(|h| h[i]).count() as f64 / 50.0).collect();
    let detail = names.iter().zip(&rates).map(|(n, r)| format!("{n} {:.0}%", 100.0 * r)).collect::<Vec<_>>().join(", ");
    Ok((rates.iter().all(|&r| r >= 0.9), format!("within 3 SD: {detail} (each ≥ 90%)")))
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, nd) = (4, 12);
    let evs: Vec<DatasetEvidence> = (0..nd)
        .map(|s| DatasetEvidence::unconstrained(format!("{s}"), normals(&mut rng, d), DMatrix::zeros(d, d)).unwrap())
        .collect();
    let mean = evs.iter().fold(DVector::zeros(d), |a, e| a + e.lambda_hat()) / nd as f64;
    let scatter = evs.iter().fold(DMatrix::zeros(d, d), |a, e| {
        let r = e.lambda_hat() - &mean;
        a + &r * r.transpose()
    }) / nd as f64;
    let mut worst_mu = 0.0f64;
    let mut worst_cov = 0.0f64;
    for chart in [false, true] {
        let fit = hierarchical::fit(&evs, chart).map_err(|e| e.to_string())?;
        worst_mu = worst_mu.max((&fit.psi.mu - &mean).amax());
        worst_cov = worst_cov.max((&fit.psi.cov - &scatter).amax());
    }
    let v = random_spd(&mut rng, d, 0.1, 1.0);
    let equal: Vec<DatasetEvidence> = (0..nd)
        .map(|s| DatasetEvidence::unconstrained(format!("{s}"), normals(&mut rng, d), v.clone()).unwrap())
        .collect();
    let sigma = random_spd(&mut rng, d, 0.1, 1.0);
    let (weights, _) = mu_weights(&sigma, &equal).map_err(|e| e.to_string())?;
    let target = DMatrix::<f64>::identity(d, d) / nd as f64;
    let worst_w = weights.iter().map(|w| (w - &target).amax()).fold(0.0, f64::max);
    Ok((
        worst_mu < 1e-8 && worst_cov < 1e-8 && worst_w < 1e-10,
        format!("|μ̂ − mean| {worst_mu:.2e}, |Σ̂ − scatter| {worst_cov:.2e} (< 1e-8); |Λ_s − I/N| {worst_w:.2e} (< 1e-10)"),
    ))
}

fn hierarchical_scenario(seed: u64) -> SynthScenario {
    let mu = DVector::from_vec(vec![4.2, 0.05, 0.370, 0.616, 0.696]);
    let mu = {
        let mut m = mu;
        let norm = m.rows(2, 3).norm();
        let mut phi = m.rows_mut(2, 3);
        phi /= norm;
        m
    };
    let sd = [0.035, 0.005, 0.003, 0.003, 0.003];
    let cov = DMatrix::from_diagonal(&DVector::from_iterator(5, sd.iter().map(|s| s * s)));
    SynthScenario {
        true_hyper: HyperParams::new(mu, cov).unwrap(),
        channels: 3,
        samples: 30000,
        dt: 0.01,
        order: ResponseOrder::Acceleration,
        s_range: (0.5, 2.0),
        se_range: (0.05, 0.2),
        datasets: 40,
        seed,
        domain: SynthDomain::Frequency,
    }
}

struct Replication {
    evidences: Vec<DatasetEvidence>,
    fit: HyperFit,
    laplace: HyperPosteriorLaplace,
    conditionals: Vec<Gaussian>,
}

fn replicate(seed: u64) -> Result<Replication, String> {
    let sc = hierarchical_scenario(seed);
    let freqs = band_grid(&FrequencyBand::new(3.2, 5.2).unwrap(), sc.samples, sc.dt);
    let evidences = (0..sc.datasets)
        .map(|s| {
            let (_, lines) = generate_band_dataset(&sc, s, &freqs).map_err(|e| e.to_string())?;
            let band = Band::new(&lines, sc.order).map_err(|e| e.to_string())?;
            let id = identify(&band).map_err(|e| e.to_string())?;
            hbmodal::modal::split_evidence(&id.posterior, &format!("{seed}-{s}"))
                .map(|(ev, _)| ev)
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let evidences = hierarchical::align_mode_signs(&evidences).map_err(|e| e.to_string())?;
    let fit = hierarchical::fit(&evidences, true).map_err(|e| e.to_string())?;
    let laplace = hierarchical::hyper_laplace(&fit, &evidences).map_err(|e| e.to_string())?;
    let conditionals = hierarchical::conditionals(&evidences, &fit, true).map_err(|e| e.to_string())?;
    Ok(Replication {
        evidences,
        fit,
        laplace,
        conditionals,
    })
}

fn criterion_7(reps: &[Replication]) -> Check {
    let truth = hierarchical_scenario(0).true_hyper;
    let d = truth.dim();
    let mut hits = vec![0usize; d];
    let mut pred_sd = 0.0;
    for r in reps {
        let sd = r.laplace.mu_sd(d);
        for i in 0..d {
            if (r.fit.psi.mu[i] - truth.mu[i]).abs() <= 3.0 * sd[i] {
                hits[i] += 1;
            }
        }
        pred_sd += r.fit.psi.cov[(0, 0)].sqrt() / reps.len() as f64;
    }
    let rates: Vec<f64> = hits.iter().map(|&h| h as f64 / reps.len() as f64).collect();
    let rel = (pred_sd / 0.035 - 1.0).abs();
    Ok((
        rates.iter().all(|&r| r >= 0.9) && rel < 0.3,
        format!(
            "μ̂ within 3 SD: {} (each ≥ 90%); mean predictive SD(f) {pred_sd:.4} vs 0.035 ({:.0}% off, < 30%)",
            rates.iter().map(|r| format!("{:.0}%", 100.0 * r)).collect::<Vec<_>>().join(", "),
            100.0 * rel
        ),
    ))
}

fn criterion_8(reps: &[Replication]) -> Check {
    let mut worst = f64::INFINITY;
    for r in reps {
        for (ev, c) in r.evidences.iter().zip(&r.conditionals) {
            let diff = ev.cov() - c.cov();
            let diff = (&diff + diff.transpose()) * 0.5;
            worst = worst.min(SymmetricEigen::new(diff).eigenvalues.min());
        }
    }
    Ok((worst >= -1e-10, format!("min eigenvalue of Σ̂_s − conditional cov {worst:.2e} (≥ −1e-10)")))
}

fn moments_check(mix: &GaussianMixture, mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let n = 100_000;
    let draws: Vec<DVector<f64>> = (0..n).map(|_| mix.sample(rng)).collect();
    let d = mean.len();
    let mut worst = 0.0f64;
    for i in 0..d {
        let xs: Vec<f64> = draws.iter().map(|x| x[i]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let se_mean = (cov[(i, i)] / n as f64).sqrt();
        let se_var = ((m4 - var * var) / n as f64).sqrt();
        worst = worst.max((m - mean[i]).abs() / se_mean).max((var - cov[(i, i)]).abs() / se_var);
    }
    worst
}

fn criterion_9(rep: &Replication) -> Check {
    let d = rep.fit.psi.dim();
    let chart = rep.fit.chart.clone().ok_or("fit has no chart")?;
    let coords = HyperCoords::Chart(chart);
    let prior = HyperPrior::default_for(d - 2, 50.0);
    let pbox = PriorBox::from_prior(&prior, &coords).map_err(|e| e.to_string())?;
    let set = sample_hyper(&rep.evidences, &pbox, &coords, &TmcmcOptions::default(), 9).map_err(|e| e.to_string())?;
    let mean = set.mean_mu();
    let sd = rep.laplace.mu_sd(d);
    let dev: Vec<f64> = (0..d).map(|i| (mean[i] - rep.fit.psi.mu[i]).abs() / sd[i]).collect();
    let worst_dev = dev.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cond = mixture_conditional(&set.hypers, &rep.evidences[0]).map_err(|e| e.to_string())?;
    let pred = mixture_predictive(&set.hypers).map_err(|e| e.to_string())?;
    let z_cond = moments_check(&cond.mixture, &cond.mean, &cond.cov, &mut rng);
    let z_pred = moments_check(&pred.mixture, &pred.mean, &pred.cov, &mut rng);
    Ok((
        worst_dev < 0.5 && z_cond < 3.0 && z_pred < 3.0,
        format!(
            "{} stages; |TMCMC mean − MAP| / SD max {worst_dev:.2} (< 0.5); mixture vs 1e5 draws max {:.2} SE (< 3)",
            set.stage_exponents.len() - 1,
            z_cond.max(z_pred)
        ),
    ))
}

fn criterion_10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mu = DVector::from_vec(vec![4.2, 0.02, 0.6, 0.8]);
    let sd_true = [0.03, 0.001, 0.002, 0.002];
    let nd = 20;
    let evs: Vec<DatasetEvidence> = (0..nd)
        .map(|s| {
            let lambda = DVector::from_fn(4, |i, _| mu[i] + sd_true[i] * rng.sample::<f64, _>(StandardNormal));
            let sd_xi = rng.random_range(0.008..0.015);
            draw_evidence(&format!("{s}"), &lambda, (0.005, sd_xi, 0.004), &mut rng).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let fit = hierarchical::fit(&evs, true).map_err(|e| e.to_string())?;
    let conds = hierarchical::conditionals(&evs, &fit, true).map_err(|e| e.to_string())?;
    let mean_sd = evs.iter().map(|e| e.cov()[(1, 1)].sqrt()).sum::<f64>() / nd as f64;
    let worst = conds.iter().map(|c| c.cov()[(1, 1)].max(0.0).sqrt()).fold(0.0, f64::max);
    Ok((worst < mean_sd, format!("max conditional SD(ξ) {worst:.2e} < mean per-dataset SD(ξ̂) {mean_sd:.2e}")))
}

fn criterion_11() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = draw_evidence("a", &DVector::from_vec(vec![4.2, 0.02, 0.6, 0.8]), (0.01, 0.003, 0.004), &mut rng).unwrap();
    let evs: Vec<DatasetEvidence> = (0..5)
        .map(|s| DatasetEvidence::new(format!("{s}"), base.lambda_hat().clone(), base.cov().clone()).unwrap())
        .collect();
    let mut details = Vec::new();
    let mut ok = true;
    for chart in [true, false] {
        let fit = hierarchical::fit(&evs, chart).map_err(|e| e.to_string())?;
        let top = SymmetricEigen::new(fit.psi.cov.clone()).eigenvalues.max();
        hierarchical::hyper_laplace(&fit, &evs).map_err(|e| e.to_string())?;
        hierarchical::conditionals(&evs, &fit, chart).map_err(|e| e.to_string())?;
        ok &= fit.no_variability && top <= 1e-8 * base.cov().trace();
        details.push(format!("{}: flag {}, max eigenvalue {top:.1e}", if chart { "chart" } else { "full" }, fit.no_variability));
    }
    Ok((ok, details.join("; ")))
}

fn report(n: usize, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let (pass, detail) = match result {
        Ok((p, d)) => (p && in_time, d),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n:>2}: {} | {detail} | {:.1} s (budget {} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut passed = Vec::new();
    passed.push(report(1, secs(10), criterion_1));
    passed.push(report(2, secs(5), criterion_2));
    passed.push(report(3, secs(30), criterion_3));
    passed.push(report(4, secs(10), criterion_4));
    passed.push(report(5, secs(120), criterion_5));
    passed.push(report(6, secs(5), criterion_6));

    let start = Instant::now();
    let reps: Result<Vec<Replication>, String> = (0..20u64).into_par_iter().map(|r| replicate(1000 + r)).collect();
    let setup = start.elapsed();
    match reps {
        Ok(reps) => {
            passed.push(report(7, secs(600).saturating_sub(setup), || criterion_7(&reps)));
            passed.push(report(8, secs(5), || criterion_8(&reps)));
            passed.push(report(9, secs(900), || criterion_9(&reps[0])));
        }
        Err(e) => {
            for n in 7..=9 {
                passed.push(report(n, secs(1), || Err(format!("replications failed: {e}"))));
            }
        }
    }
    println!("(criteria 7-9 share 20 replications generated and identified in {:.1} s)", setup.as_secs_f64());
    passed.push(report(10, secs(5), criterion_10));
    passed.push(report(11, secs(5), criterion_11));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
