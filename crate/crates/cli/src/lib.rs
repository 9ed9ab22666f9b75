//! Commands behind the `hbmodal` binary: spectrum, identify, fuse, predict
//! and synth. Each reads configuration from files and writes its outputs into
//! an output directory.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hbmodal::evidence::DatasetEvidence;
use hbmodal::hierarchical::{self, align_mode_signs, canonical_order, eigenbasis_reduce};
use hbmodal::io::{
    self, format_lambda_csv, format_samples_csv, format_spectrum_csv, parameter_names, to_canonical_json, Algorithm, DatasetSummary,
    EvidenceRecord, FusionReport, GaussianSummary, HyperLaplaceSummary, IdentifyReport, IdentifyStatus, IndefiniteFlag, MapSummary,
    ModeConfig, ModeReport, ProjectConfig, ThetaRecord, TmcmcSummary, TruthDataset, TruthRecord,
};
use hbmodal::linalg::to_row_major;
use hbmodal::modal::{identify, Band};
use hbmodal::spectral::{band_select, scaled_fft, singular_value_spectrum, TimeHistory};
use hbmodal::synth::{generate_dataset, SynthScenario};
use hbmodal::tmcmc::{mixture_conditional, mixture_predictive, sample_hyper, HyperCoords, PriorBox, TmcmcOptions};
use hbmodal::Error;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Every unit of work failed; exit code 3.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn dataset_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_dataset(cfg: &ProjectConfig, path: &Path) -> hbmodal::Result<TimeHistory> {
    let th = io::read_record(path)?;
    if let Some(dt) = cfg.dt {
        if (th.dt() - dt).abs() > 1e-9 * dt {
            return Err(Error::InvalidInput(format!("record has dt = {}, project expects {dt}", th.dt())));
        }
    }
    if let Some(q) = cfg.order {
        if th.order() != q {
            return Err(Error::InvalidInput(format!("record has q = {}, project expects {}", th.order().q(), q.q())));
        }
    }
    Ok(if cfg.demean { th.demeaned() } else { th })
}

fn check_dataset_ids(cfg: &ProjectConfig) -> Result<Vec<String>, CliError> {
    if cfg.datasets.is_empty() {
        return Err(usage("the project lists no datasets"));
    }
    let ids: Vec<String> = cfg.datasets.iter().map(|p| dataset_id(p)).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("two datasets share the id '{}'", w[0])));
    }
    Ok(ids)
}

/// Averaged singular value spectrum to `<out>/spectrum.csv`.
pub fn cmd_spectrum(cfg: &ProjectConfig, out: &Path) -> Result<PathBuf, CliError> {
    check_dataset_ids(cfg)?;
    let records = cfg
        .datasets
        .iter()
        .map(|p| load_dataset(cfg, p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let sv = singular_value_spectrum(&records).map_err(usage)?;
    let path = out.join("spectrum.csv");
    write_file(&path, &format_spectrum_csv(&sv))?;
    Ok(path)
}

fn identify_one(cfg: &ProjectConfig, path: &Path, id: &str) -> Vec<(IdentifyStatus, Option<EvidenceRecord>)> {
    let failed = |mode: &ModeConfig, message: String| {
        log::warn!("{id} / {}: {message}", mode.name);
        (
            IdentifyStatus {
                dataset_id: id.to_string(),
                mode: mode.name.clone(),
                ok: false,
                converged: false,
                message: Some(message),
            },
            None,
        )
    };
    let th = match load_dataset(cfg, path) {
        Ok(th) => th,
        Err(e) => return cfg.modes.iter().map(|m| failed(m, format!("{}: {e}", path.display()))).collect(),
    };
    let lines = scaled_fft(&th);
    cfg.modes
        .iter()
        .map(|mode| {
            let result = (|| {
                if mode.band.f_ub >= th.nyquist() {
                    return Err(Error::InvalidInput(format!("band reaches the Nyquist frequency {} Hz", th.nyquist())));
                }
                let band = Band::new(&band_select(&lines, &mode.band)?, th.order())?;
                let ident = identify(&band)?;
                Ok(EvidenceRecord::from_identification(id, &mode.name, mode.band, &ident))
            })();
            match result {
                Ok(rec) => {
                    if !rec.converged {
                        log::warn!("{id} / {}: optimizer stopped before convergence", mode.name);
                    }
                    (
                        IdentifyStatus {
                            dataset_id: id.to_string(),
                            mode: mode.name.clone(),
                            ok: true,
                            converged: rec.converged,
                            message: None,
                        },
                        Some(rec),
                    )
                }
                Err(e) => failed(mode, e.to_string()),
            }
        })
        .collect()
}

/// One evidence file per (dataset, mode) under `<out>/evidence/<mode>/`,
/// plus `<out>/identify_report.json`.
pub fn cmd_identify(cfg: &ProjectConfig, out: &Path) -> Result<IdentifyReport, CliError> {
    let ids = check_dataset_ids(cfg)?;
    if cfg.modes.is_empty() {
        return Err(usage("the project defines no [mode] bands"));
    }
    let results: Vec<Vec<(IdentifyStatus, Option<EvidenceRecord>)>> = cfg
        .datasets
        .par_iter()
        .zip(ids.par_iter())
        .map(|(path, id)| identify_one(cfg, path, id))
        .collect();
    let mut report = IdentifyReport { results: Vec::new() };
    for (status, rec) in results.into_iter().flatten() {
        if let Some(rec) = rec {
            let path = out.join("evidence").join(&rec.mode).join(format!("{}.json", rec.dataset_id));
            write_file(&path, &to_canonical_json(&rec).map_err(usage)?)?;
        }
        report.results.push(status);
    }
    write_file(&out.join("identify_report.json"), &to_canonical_json(&report).map_err(usage)?)?;
    if report.results.iter().all(|s| !s.ok) {
        return Err(CliError::Failure("identification failed for every dataset".into()));
    }
    Ok(report)
}

fn read_evidence_dir(dir: &Path) -> Result<Vec<EvidenceRecord>, CliError> {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            EvidenceRecord::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Remove datasets whose mode shape is nearly orthogonal to the reference,
/// then flip signs of the rest.
fn aligned(mut evs: Vec<DatasetEvidence>, warnings: &mut Vec<String>) -> hbmodal::Result<Vec<DatasetEvidence>> {
    loop {
        match align_mode_signs(&evs) {
            Ok(a) => return Ok(a),
            Err(Error::ModeMismatch { dataset, cosine }) => {
                let msg = format!("dataset {dataset} dropped: mode shape |cos| = {cosine:.3} against the reference");
                log::warn!("{msg}");
                warnings.push(msg);
                evs.retain(|e| e.dataset_id != dataset);
            }
            Err(e) => return Err(e),
        }
    }
}

fn summaries(ids: &[String], gs: &[(DVector<f64>, nalgebra::DMatrix<f64>)]) -> Vec<DatasetSummary> {
    let mut out: Vec<DatasetSummary> = ids
        .iter()
        .zip(gs)
        .map(|(id, (m, c))| {
            let g = GaussianSummary::new(m, c);
            DatasetSummary {
                dataset_id: id.clone(),
                mean: g.mean,
                sd: g.sd,
            }
        })
        .collect();
    out.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
    out
}

/// Options shared by `fuse` and `predict`.
#[derive(Debug, Clone)]
pub struct FuseOptions {
    pub evidence_dir: PathBuf,
    pub algorithm: Algorithm,
    pub seed: u64,
}

fn fuse_mode(cfg: &ProjectConfig, mode: &ModeConfig, opts: &FuseOptions, out: &Path) -> hbmodal::Result<ModeReport> {
    let records = read_evidence_dir(&opts.evidence_dir.join(&mode.name)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut warnings = Vec::new();
    let mut evs = Vec::new();
    for rec in &records {
        if rec.mode != mode.name {
            warnings.push(format!("{}: record belongs to mode '{}', skipped", rec.dataset_id, rec.mode));
            continue;
        }
        if !rec.converged {
            warnings.push(format!("{}: identification did not converge", rec.dataset_id));
        }
        evs.push(rec.evidence()?);
    }
    evs.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
    let evs = aligned(evs, &mut warnings)?;
    if evs.len() < 2 {
        return Err(Error::InvalidInput(format!("mode '{}' has {} usable evidence records, need 2", mode.name, evs.len())));
    }
    let evs = canonical_order(&evs);
    let d = evs[0].dim();
    let ids: Vec<String> = evs.iter().map(|e| e.dataset_id.clone()).collect();

    let fit = hierarchical::fit(&evs, cfg.chart)?;
    if !fit.converged {
        warnings.push("hyper-parameter MAP stopped before convergence".into());
    }
    if fit.no_variability {
        warnings.push("no across-dataset variability detected: Σ̂ is on the zero boundary".into());
    }
    let lap = hierarchical::hyper_laplace(&fit, &evs)?;
    if let Some((ev, _)) = &lap.indefinite {
        warnings.push(format!("hyper-Hessian is not positive definite (eigenvalue {ev:e}); SDs use a pseudo-inverse"));
    }
    let conds = hierarchical::conditionals(&evs, &fit, cfg.chart)?;
    let pred = hierarchical::predictive(&fit.psi);

    let lambda_file = format!("lambda_{}.csv", mode.name);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(&lambda_file), format_lambda_csv(&canonical_by_id(&evs)))?;

    let tmcmc = match opts.algorithm {
        Algorithm::Laplace => None,
        Algorithm::Tmcmc => {
            let nyquist = cfg.dt.map(|dt| 0.5 / dt);
            let mut prior = cfg.prior.resolve(d - 2, nyquist.unwrap_or(mode.band.f_ub));
            if nyquist.is_none() && cfg.prior.mu_f.is_none() {
                prior.mu_lo[0] = mode.band.f_lb;
            }
            let coords = if cfg.chart {
                HyperCoords::Chart(fit.chart.clone().unwrap_or_else(|| eigenbasis_reduce(&fit.psi.cov)))
            } else {
                HyperCoords::Correlation { dim: d }
            };
            let pbox = PriorBox::from_prior(&prior, &coords)?;
            let topts = TmcmcOptions {
                samples: cfg.samples,
                ..Default::default()
            };
            let set = sample_hyper(&evs, &pbox, &coords, &topts, opts.seed)?;
            let sample_file = format!("samples_{}.csv", mode.name);
            std::fs::write(out.join(&sample_file), format_samples_csv(&set.hypers, &set.log_target_values))?;
            let mu_samples: Vec<DVector<f64>> = set.hypers.iter().map(|h| h.mu.clone()).collect();
            let mu_mean = set.mean_mu();
            let mu_cov = mu_samples
                .iter()
                .fold(nalgebra::DMatrix::zeros(d, d), |a, m| a + (m - &mu_mean) * (m - &mu_mean).transpose())
                / set.len() as f64;
            let mix_conds = evs
                .iter()
                .map(|ev| mixture_conditional(&set.hypers, ev).map(|m| (m.mean, m.cov)))
                .collect::<hbmodal::Result<Vec<_>>>()?;
            let mix_pred = mixture_predictive(&set.hypers)?;
            Some(TmcmcSummary {
                samples: set.len(),
                seed: opts.seed,
                stage_exponents: set.stage_exponents.clone(),
                log_evidence: set.log_evidence,
                mu: GaussianSummary::new(&mu_mean, &mu_cov),
                conditionals: summaries(&ids, &mix_conds),
                predictive: GaussianSummary::new(&mix_pred.mean, &mix_pred.cov),
                sample_file,
            })
        }
    };

    let cond_pairs: Vec<_> = conds.iter().map(|g| (g.mean().clone(), g.cov().clone())).collect();
    Ok(ModeReport {
        mode: mode.name.clone(),
        band: mode.band,
        algorithm: opts.algorithm,
        parameters: parameter_names(d - 2),
        datasets: {
            let mut v = ids.clone();
            v.sort();
            v
        },
        map: MapSummary {
            mu: fit.psi.mu.iter().cloned().collect(),
            covariance: to_row_major(&fit.psi.cov),
            nll: fit.nll,
            iterations: fit.iterations,
            converged: fit.converged,
            charted: fit.chart.is_some(),
            no_variability: fit.no_variability,
            mu_phi_norm: fit.psi.mu_phi_norm(),
        },
        hyper_laplace: HyperLaplaceSummary {
            sd_mu: lap.mu_sd(d).iter().cloned().collect(),
            sd_variance: lap.variance_sd(d, fit.chart.as_ref()).iter().cloned().collect(),
            indefinite: lap.indefinite.as_ref().map(|(e, v)| IndefiniteFlag {
                eigenvalue: *e,
                direction: v.clone(),
            }),
        },
        conditionals: summaries(&ids, &cond_pairs),
        predictive: GaussianSummary::new(pred.mean(), pred.cov()),
        tmcmc,
        lambda_file,
        warnings,
    })
}

fn canonical_by_id(evs: &[DatasetEvidence]) -> Vec<DatasetEvidence> {
    let mut v = evs.to_vec();
    v.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
    v
}

/// Fusion report at `<out>/fusion_report.json` with per-mode λ̂ CSVs and,
/// for TMCMC, sample CSVs. Modes that fail are reported as warnings; the
/// command fails only when every mode does.
pub fn cmd_fuse(cfg: &ProjectConfig, opts: &FuseOptions, out: &Path) -> Result<FusionReport, CliError> {
    if cfg.modes.is_empty() {
        return Err(usage("the project defines no [mode] bands"));
    }
    let mut report = FusionReport { modes: Vec::new() };
    let mut failures = Vec::new();
    for mode in &cfg.modes {
        match fuse_mode(cfg, mode, opts, out) {
            Ok(r) => report.modes.push(r),
            Err(e) => {
                log::warn!("mode {}: {e}", mode.name);
                failures.push(format!("{}: {e}", mode.name));
            }
        }
    }
    if report.modes.is_empty() {
        return Err(CliError::Failure(format!("fusion failed for every mode: {}", failures.join("; "))));
    }
    write_file(&out.join("fusion_report.json"), &to_canonical_json(&report).map_err(usage)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveEntry {
    pub mode: String,
    pub parameters: Vec<String>,
    pub laplace: GaussianSummary,
    pub tmcmc: Option<GaussianSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveReport {
    pub modes: Vec<PredictiveEntry>,
}

impl From<&FusionReport> for PredictiveReport {
    fn from(r: &FusionReport) -> Self {
        PredictiveReport {
            modes: r
                .modes
                .iter()
                .map(|m| PredictiveEntry {
                    mode: m.mode.clone(),
                    parameters: m.parameters.clone(),
                    laplace: m.predictive.clone(),
                    tmcmc: m.tmcmc.as_ref().map(|t| t.predictive.clone()),
                })
                .collect(),
        }
    }
}

/// Runs the fusion and extracts the predictive section into
/// `<out>/predictive.json`.
pub fn cmd_predict(cfg: &ProjectConfig, opts: &FuseOptions, out: &Path) -> Result<PredictiveReport, CliError> {
    let report = cmd_fuse(cfg, opts, out)?;
    let pred = PredictiveReport::from(&report);
    write_file(&out.join("predictive.json"), &to_canonical_json(&pred).map_err(usage)?)?;
    Ok(pred)
}

/// `dataset_NNN.csv` records and `truth.json` in `out`.
pub fn cmd_synth(sc: &SynthScenario, out: &Path) -> Result<TruthRecord, CliError> {
    sc.validate().map_err(usage)?;
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    let width = sc.datasets.to_string().len().max(3);
    let generated = (0..sc.datasets)
        .into_par_iter()
        .map(|s| generate_dataset(sc, s))
        .collect::<hbmodal::Result<Vec<_>>>()
        .map_err(|e| CliError::Failure(e.to_string()))?;
    let mut datasets = Vec::with_capacity(sc.datasets);
    for (s, (theta, th)) in generated.iter().enumerate() {
        let id = format!("dataset_{:0width$}", s + 1);
        let file = format!("{id}.csv");
        write_file(&out.join(&file), &io::format_record(th))?;
        datasets.push(TruthDataset {
            dataset_id: id,
            file,
            theta: ThetaRecord::from(theta),
        });
    }
    let truth = TruthRecord {
        seed: sc.seed,
        mu: sc.true_hyper.mu.iter().cloned().collect(),
        covariance: to_row_major(&sc.true_hyper.cov),
        datasets,
    };
    write_file(&out.join("truth.json"), &to_canonical_json(&truth).map_err(usage)?)?;
    Ok(truth)
}
