//! Text formats: record CSV, sectioned key/value configuration files, and the
//! JSON and CSV reports written by the command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::DatasetEvidence;
use crate::hierarchical::{upper_indices, HyperParams, HyperPrior};
use crate::linalg::{from_row_major, to_row_major};
use crate::modal::{split_evidence, Identification, LaplacePosterior, ModalParams};
use crate::spectral::{FrequencyBand, ResponseOrder, SingularValueSpectrum, TimeHistory};
use crate::synth::{SynthDomain, SynthScenario};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

// Record CSV

/// `# dt=<s> q=<0|1|2> channels=<n>` followed by one comma-separated row of
/// channel values per time step.
pub fn format_record(th: &TimeHistory) -> String {
    let mut out = format!("# dt={} q={} channels={}\n", th.dt(), th.order().q(), th.channels());
    let y = th.samples();
    for j in 0..th.len() {
        for i in 0..th.channels() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", y[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_record(text: &str) -> Result<TimeHistory> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty record"))?;
    let header = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "record must start with '# dt=... q=... channels=...'"))?;
    let (mut dt, mut q, mut channels) = (None, None, None);
    for token in header.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("malformed header token '{token}'")))?;
        let bad = |what: &str| parse_err(1, format!("invalid {what} '{value}'"));
        match key {
            "dt" if dt.is_none() => dt = Some(value.parse::<f64>().map_err(|_| bad("dt"))?),
            "q" if q.is_none() => q = Some(value.parse::<u8>().map_err(|_| bad("q"))?),
            "channels" if channels.is_none() => channels = Some(value.parse::<usize>().map_err(|_| bad("channels"))?),
            _ => return Err(parse_err(1, format!("unexpected header key '{key}'"))),
        }
    }
    let dt = dt.ok_or_else(|| parse_err(1, "header is missing dt"))?;
    let order = ResponseOrder::try_from(q.ok_or_else(|| parse_err(1, "header is missing q"))?).map_err(|e| parse_err(1, e.to_string()))?;
    let n = channels.ok_or_else(|| parse_err(1, "header is missing channels"))?;
    if n == 0 {
        return Err(parse_err(1, "channels must be positive"));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(i + 1, format!("invalid number '{}'", field.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(i + 1, "non-finite sample"));
            }
            values.push(v);
        }
        if values.len() - before != n {
            return Err(parse_err(i + 1, format!("expected {n} values, found {}", values.len() - before)));
        }
        rows += 1;
    }
    let samples = DMatrix::from_column_slice(n, rows, &values);
    TimeHistory::new(samples, dt, order)
}

pub fn read_record(path: &Path) -> Result<TimeHistory> {
    parse_record(&std::fs::read_to_string(path)?)
}

pub fn write_record(path: &Path, th: &TimeHistory) -> Result<()> {
    Ok(std::fs::write(path, format_record(th))?)
}

// Sectioned key/value files

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(parse_err(e.line, format!("unknown key '{}' in [{}]", e.key, self.name))),
            None => Ok(()),
        }
    }
}

/// Lines are blank, comments (`#` or `;`), `[section]` headers or
/// `key = value` pairs. Keys are ASCII alphanumerics and `_`; a key may
/// appear once per section except where listed in `repeatable`.
pub fn parse_sections(text: &str, repeatable: &[&str]) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(ln, "section header must end with ']'"))?
                .trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(parse_err(ln, format!("invalid section name '{name}'")));
            }
            sections.push(Section {
                name: name.to_string(),
                line: ln,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| parse_err(ln, "expected 'key = value'"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(parse_err(ln, format!("invalid key '{key}'")));
        }
        if value.is_empty() {
            return Err(parse_err(ln, format!("key '{key}' has no value")));
        }
        let section = sections.last_mut().ok_or_else(|| parse_err(ln, "key outside of any section"))?;
        if !repeatable.contains(&key) && section.get(key).is_some() {
            return Err(parse_err(ln, format!("duplicate key '{key}' in [{}]", section.name)));
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line: ln,
        });
    }
    Ok(sections)
}

fn num(e: &Entry) -> Result<f64> {
    match e.value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(e.line, format!("'{}' is not a finite number", e.value))),
    }
}

fn list(e: &Entry) -> Result<Vec<f64>> {
    e.value
        .split(',')
        .map(|s| match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(parse_err(e.line, format!("'{}' is not a finite number", s.trim()))),
        })
        .collect()
}

fn pair(e: &Entry) -> Result<(f64, f64)> {
    match list(e)?.as_slice() {
        &[a, b] if a <= b => Ok((a, b)),
        &[_, _] => Err(parse_err(e.line, format!("'{}': lower bound exceeds upper bound", e.key))),
        _ => Err(parse_err(e.line, format!("'{}' needs two comma-separated numbers", e.key))),
    }
}

fn count(e: &Entry) -> Result<usize> {
    e.value
        .parse()
        .map_err(|_| parse_err(e.line, format!("'{}' is not a non-negative integer", e.value)))
}

fn int(e: &Entry) -> Result<u64> {
    e.value
        .parse()
        .map_err(|_| parse_err(e.line, format!("'{}' is not a non-negative integer", e.value)))
}

fn flag(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        v => Err(parse_err(e.line, format!("'{v}' is not a boolean"))),
    }
}

fn order(e: &Entry) -> Result<ResponseOrder> {
    let q: u8 = e
        .value
        .parse()
        .map_err(|_| parse_err(e.line, format!("q must be 0, 1 or 2, got '{}'", e.value)))?;
    ResponseOrder::try_from(q).map_err(|err| parse_err(e.line, err.to_string()))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// Project configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Laplace,
    Tmcmc,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(Algorithm::Laplace),
            "tmcmc" => Ok(Algorithm::Tmcmc),
            _ => Err(Error::InvalidInput(format!("algorithm must be 'laplace' or 'tmcmc', got '{s}'"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Laplace => "laplace",
            Algorithm::Tmcmc => "tmcmc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeConfig {
    pub name: String,
    pub band: FrequencyBand,
}

/// Box bounds overriding the defaults; `None` keeps the default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorConfig {
    pub mu_f: Option<(f64, f64)>,
    pub mu_xi: Option<(f64, f64)>,
    pub mu_phi: Option<(f64, f64)>,
    pub var: Option<(f64, f64)>,
}

impl PriorConfig {
    pub fn resolve(&self, channels: usize, nyquist: f64) -> HyperPrior {
        let mut p = HyperPrior::default_for(channels, nyquist);
        let d = channels + 2;
        if let Some((lo, hi)) = self.mu_f {
            p.mu_lo[0] = lo;
            p.mu_hi[0] = hi;
        }
        if let Some((lo, hi)) = self.mu_xi {
            p.mu_lo[1] = lo;
            p.mu_hi[1] = hi;
        }
        if let Some((lo, hi)) = self.mu_phi {
            for i in 2..d {
                p.mu_lo[i] = lo;
                p.mu_hi[i] = hi;
            }
        }
        if let Some((lo, hi)) = self.var {
            p.var_lo.fill(lo);
            p.var_hi.fill(hi);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectConfig {
    pub datasets: Vec<PathBuf>,
    /// Expected sampling interval; records disagreeing with it are rejected.
    pub dt: Option<f64>,
    pub order: Option<ResponseOrder>,
    pub modes: Vec<ModeConfig>,
    pub prior: PriorConfig,
    pub algorithm: Algorithm,
    pub samples: usize,
    pub seed: u64,
    pub chart: bool,
    pub demean: bool,
    pub output: PathBuf,
}

impl ProjectConfig {
    /// Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let sections = parse_sections(text, &["dataset"])?;
        let mut cfg = ProjectConfig {
            datasets: Vec::new(),
            dt: None,
            order: None,
            modes: Vec::new(),
            prior: PriorConfig::default(),
            algorithm: Algorithm::Laplace,
            samples: 2000,
            seed: 0,
            chart: true,
            demean: false,
            output: base.join("out"),
        };
        let mut seen_project = false;
        let mut seen_prior = false;
        for sec in &sections {
            match sec.name.as_str() {
                "project" => {
                    if std::mem::replace(&mut seen_project, true) {
                        return Err(parse_err(sec.line, "duplicate [project] section"));
                    }
                    sec.check_keys(&["dataset", "dt", "q", "algorithm", "samples", "seed", "chart", "demean", "output"])?;
                    cfg.datasets = sec.all("dataset").map(|e| resolve(base, &e.value)).collect();
                    if let Some(e) = sec.get("dt") {
                        let dt = num(e)?;
                        if dt <= 0.0 {
                            return Err(parse_err(e.line, "dt must be positive"));
                        }
                        cfg.dt = Some(dt);
                    }
                    if let Some(e) = sec.get("q") {
                        cfg.order = Some(order(e)?);
                    }
                    if let Some(e) = sec.get("algorithm") {
                        cfg.algorithm = e.value.parse().map_err(|err: Error| parse_err(e.line, err.to_string()))?;
                    }
                    if let Some(e) = sec.get("samples") {
                        cfg.samples = count(e)?;
                        if cfg.samples < 100 {
                            return Err(parse_err(e.line, "samples must be at least 100"));
                        }
                    }
                    if let Some(e) = sec.get("seed") {
                        cfg.seed = int(e)?;
                    }
                    if let Some(e) = sec.get("chart") {
                        cfg.chart = flag(e)?;
                    }
                    if let Some(e) = sec.get("demean") {
                        cfg.demean = flag(e)?;
                    }
                    if let Some(e) = sec.get("output") {
                        cfg.output = resolve(base, &e.value);
                    }
                }
                "mode" => {
                    sec.check_keys(&["name", "band"])?;
                    let e = sec.get("band").ok_or_else(|| parse_err(sec.line, "[mode] needs a band"))?;
                    let (lo, hi) = pair(e)?;
                    let band = FrequencyBand::new(lo, hi).map_err(|err| parse_err(e.line, err.to_string()))?;
                    let name = sec
                        .get("name")
                        .map(|e| e.value.clone())
                        .unwrap_or_else(|| format!("mode{}", cfg.modes.len() + 1));
                    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                        return Err(parse_err(sec.line, format!("mode name '{name}' must be alphanumeric")));
                    }
                    if cfg.modes.iter().any(|m| m.name == name) {
                        return Err(parse_err(sec.line, format!("duplicate mode name '{name}'")));
                    }
                    if let Some(m) = cfg.modes.iter().find(|m| m.band.overlaps(&band)) {
                        return Err(parse_err(e.line, format!("band overlaps mode '{}'", m.name)));
                    }
                    cfg.modes.push(ModeConfig { name, band });
                }
                "prior" => {
                    if std::mem::replace(&mut seen_prior, true) {
                        return Err(parse_err(sec.line, "duplicate [prior] section"));
                    }
                    sec.check_keys(&["mu_f", "mu_xi", "mu_phi", "var"])?;
                    cfg.prior.mu_f = sec.get("mu_f").map(pair).transpose()?;
                    cfg.prior.mu_xi = sec.get("mu_xi").map(pair).transpose()?;
                    cfg.prior.mu_phi = sec.get("mu_phi").map(pair).transpose()?;
                    cfg.prior.var = sec.get("var").map(pair).transpose()?;
                    if let Some((lo, _)) = cfg.prior.var {
                        if lo < 0.0 {
                            return Err(parse_err(sec.get("var").map_or(sec.line, |e| e.line), "variance bounds must be non-negative"));
                        }
                    }
                }
                other => return Err(parse_err(sec.line, format!("unknown section [{other}]"))),
            }
        }
        if !seen_project {
            return Err(parse_err(1, "missing [project] section"));
        }
        if let Some(dt) = cfg.dt {
            cfg.check_nyquist(0.5 / dt)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn check_nyquist(&self, nyquist: f64) -> Result<()> {
        match self.modes.iter().find(|m| m.band.f_ub >= nyquist) {
            Some(m) => Err(Error::InvalidInput(format!(
                "band of mode '{}' reaches {} Hz, at or above the Nyquist frequency {nyquist} Hz",
                m.name, m.band.f_ub
            ))),
            None => Ok(()),
        }
    }
}

// Scenario configuration

/// `[scenario]` section describing a synthetic campaign. The true
/// covariance is diagonal with variances `sd_f²`, `sd_xi²`, `sd_phi²`.
pub fn parse_scenario(text: &str) -> Result<SynthScenario> {
    let sections = parse_sections(text, &[])?;
    let sec = match sections.as_slice() {
        [s] if s.name == "scenario" => s,
        _ => return Err(parse_err(1, "expected exactly one [scenario] section")),
    };
    sec.check_keys(&[
        "channels", "samples", "dt", "q", "datasets", "seed", "domain", "s_range", "se_range", "mu_f", "mu_xi", "mu_phi", "sd_f",
        "sd_xi", "sd_phi",
    ])?;
    let req = |k: &str| sec.get(k).ok_or_else(|| parse_err(sec.line, format!("[scenario] needs '{k}'")));
    let mu_phi = list(req("mu_phi")?)?;
    let n = mu_phi.len();
    let channels = match sec.get("channels") {
        Some(e) => {
            let c = count(e)?;
            if c != n {
                return Err(parse_err(e.line, format!("channels = {c} but mu_phi has {n} entries")));
            }
            c
        }
        None => n,
    };
    let norm = mu_phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(parse_err(req("mu_phi")?.line, "mu_phi must be non-zero"));
    }
    let sd_phi_entry = req("sd_phi")?;
    let sd_phi = list(sd_phi_entry)?;
    let sd_phi = match sd_phi.len() {
        1 => vec![sd_phi[0]; n],
        m if m == n => sd_phi,
        m => return Err(parse_err(sd_phi_entry.line, format!("sd_phi has {m} entries, expected 1 or {n}"))),
    };
    let mut mu = vec![num(req("mu_f")?)?, num(req("mu_xi")?)?];
    mu.extend(mu_phi.iter().map(|v| v / norm));
    let mut sd = vec![num(req("sd_f")?)?, num(req("sd_xi")?)?];
    sd.extend(sd_phi);
    if let Some(i) = sd.iter().position(|&v| v < 0.0) {
        return Err(parse_err(sec.line, format!("standard deviation {i} is negative")));
    }
    let cov = DMatrix::from_diagonal(&DVector::from_iterator(sd.len(), sd.iter().map(|v| v * v)));
    let true_hyper = HyperParams::new(DVector::from_vec(mu), cov).map_err(|e| parse_err(sec.line, e.to_string()))?;
    let domain = match sec.get("domain").map(|e| (e.value.as_str(), e.line)) {
        None | Some(("frequency", _)) => SynthDomain::Frequency,
        Some(("time", _)) => SynthDomain::Time,
        Some((v, ln)) => return Err(parse_err(ln, format!("domain must be 'frequency' or 'time', got '{v}'"))),
    };
    let sc = SynthScenario {
        true_hyper,
        channels,
        samples: count(req("samples")?)?,
        dt: num(req("dt")?)?,
        order: sec.get("q").map(order).transpose()?.unwrap_or(ResponseOrder::Acceleration),
        s_range: pair(req("s_range")?)?,
        se_range: pair(req("se_range")?)?,
        datasets: count(req("datasets")?)?,
        seed: sec.get("seed").map(int).transpose()?.unwrap_or(0),
        domain,
    };
    sc.validate().map_err(|e| parse_err(sec.line, e.to_string()))?;
    Ok(sc)
}

// JSON records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaRecord {
    pub f: f64,
    pub xi: f64,
    pub phi: Vec<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "Se")]
    pub se: f64,
}

impl From<&ModalParams> for ThetaRecord {
    fn from(t: &ModalParams) -> Self {
        ThetaRecord {
            f: t.f,
            xi: t.xi,
            phi: t.phi.iter().cloned().collect(),
            s: t.s,
            se: t.se,
        }
    }
}

impl ThetaRecord {
    pub fn to_params(&self) -> Result<ModalParams> {
        ModalParams::new(self.f, self.xi, DVector::from_vec(self.phi.clone()), self.s, self.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRecord {
    pub dataset_id: String,
    pub mode: String,
    pub band: FrequencyBand,
    pub theta_hat: ThetaRecord,
    /// Row-major posterior covariance of `(f, ξ, φ, S, Se)`.
    pub covariance: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_nll: f64,
}

impl EvidenceRecord {
    pub fn from_identification(dataset_id: &str, mode: &str, band: FrequencyBand, id: &Identification) -> Self {
        EvidenceRecord {
            dataset_id: dataset_id.to_string(),
            mode: mode.to_string(),
            band,
            theta_hat: ThetaRecord::from(&id.posterior.theta_hat),
            covariance: to_row_major(&id.posterior.cov),
            converged: id.outcome.converged,
            iterations: id.outcome.iterations,
            final_nll: id.outcome.nll,
        }
    }

    pub fn posterior(&self) -> Result<LaplacePosterior> {
        let theta_hat = self.theta_hat.to_params()?;
        let m = theta_hat.channels() + 4;
        if self.covariance.len() != m * m {
            return Err(Error::Dimension(format!(
                "evidence {} has {} covariance entries, expected {}",
                self.dataset_id,
                self.covariance.len(),
                m * m
            )));
        }
        Ok(LaplacePosterior {
            theta_hat,
            cov: from_row_major(m, m, &self.covariance)?,
        })
    }

    pub fn evidence(&self) -> Result<DatasetEvidence> {
        Ok(split_evidence(&self.posterior()?, &self.dataset_id)?.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Outcome of identifying one (dataset, mode) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyStatus {
    pub dataset_id: String,
    pub mode: String,
    pub ok: bool,
    pub converged: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyReport {
    pub results: Vec<IdentifyStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GaussianSummary {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        GaussianSummary {
            mean: mean.iter().cloned().collect(),
            sd: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSummary {
    pub mu: Vec<f64>,
    /// Row-major.
    pub covariance: Vec<f64>,
    pub nll: f64,
    pub iterations: usize,
    pub converged: bool,
    pub charted: bool,
    pub no_variability: bool,
    pub mu_phi_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndefiniteFlag {
    pub eigenvalue: f64,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperLaplaceSummary {
    /// Standard deviation of each entry of μ.
    pub sd_mu: Vec<f64>,
    /// Standard deviation of each diagonal entry of Σ.
    pub sd_variance: Vec<f64>,
    pub indefinite: Option<IndefiniteFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmcmcSummary {
    pub samples: usize,
    pub seed: u64,
    pub stage_exponents: Vec<f64>,
    pub log_evidence: f64,
    pub mu: GaussianSummary,
    pub conditionals: Vec<DatasetSummary>,
    pub predictive: GaussianSummary,
    pub sample_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeReport {
    pub mode: String,
    pub band: FrequencyBand,
    pub algorithm: Algorithm,
    pub parameters: Vec<String>,
    pub datasets: Vec<String>,
    pub map: MapSummary,
    pub hyper_laplace: HyperLaplaceSummary,
    pub conditionals: Vec<DatasetSummary>,
    pub predictive: GaussianSummary,
    pub tmcmc: Option<TmcmcSummary>,
    pub lambda_file: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionReport {
    pub modes: Vec<ModeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthDataset {
    pub dataset_id: String,
    pub file: String,
    pub theta: ThetaRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub seed: u64,
    pub mu: Vec<f64>,
    /// Row-major.
    pub covariance: Vec<f64>,
    pub datasets: Vec<TruthDataset>,
}

/// Canonical JSON text: fields in declaration order, two-space indentation,
/// trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

// CSV outputs

/// `f, xi, phi_1 … phi_n`.
pub fn parameter_names(channels: usize) -> Vec<String> {
    let mut names = vec!["f".to_string(), "xi".to_string()];
    names.extend((1..=channels).map(|i| format!("phi_{i}")));
    names
}

/// `freq_hz, sv_1 … sv_n`, one row per frequency.
pub fn format_spectrum_csv(sv: &SingularValueSpectrum) -> String {
    let n = sv.values.first().map_or(0, |v| v.len());
    let mut out = String::from("freq_hz");
    for i in 1..=n {
        let _ = write!(out, ",sv_{i}");
    }
    out.push('\n');
    for (f, v) in sv.freqs.iter().zip(&sv.values) {
        let _ = write!(out, "{f}");
        for x in v.iter() {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// Per-dataset `λ̂_s` with one-SD error bars.
pub fn format_lambda_csv(evidences: &[DatasetEvidence]) -> String {
    let d = evidences.first().map_or(0, |e| e.dim());
    let mut out = String::from("dataset_id");
    for name in parameter_names(d.saturating_sub(2)) {
        let _ = write!(out, ",{name},{name}_sd");
    }
    out.push('\n');
    for ev in evidences {
        out.push_str(&ev.dataset_id);
        for i in 0..d {
            let _ = write!(out, ",{},{}", ev.lambda_hat()[i], ev.cov()[(i, i)].max(0.0).sqrt());
        }
        out.push('\n');
    }
    out
}

/// One row per ψ sample: `μ`, then the upper triangle of Σ by rows, then
/// the log-target.
pub fn format_samples_csv(hypers: &[HyperParams], log_target: &[f64]) -> String {
    let d = hypers.first().map_or(0, |h| h.dim());
    let names = parameter_names(d.saturating_sub(2));
    let mut out = names.iter().map(|n| format!("mu_{n}")).collect::<Vec<_>>().join(",");
    for (p, q) in upper_indices(d) {
        let _ = write!(out, ",cov_{}_{}", names[p], names[q]);
    }
    out.push_str(",log_target\n");
    for (h, l) in hypers.iter().zip(log_target) {
        let row: Vec<String> = h.packed().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{},{l}", row.join(","));
    }
    out
}
