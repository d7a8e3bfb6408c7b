//! End-to-end runs: config parsing, audits, ensemble evolution over a time
//! grid, rate fitting and report files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugacy::{conjugacy_audit, ConjugacyAudit};
use crate::ensemble::{
    default_cheb_nodes, default_mode_band, default_quad_nodes, default_samples, default_theta_grid, ActionProfile,
    Ensemble, EnsembleSpec, Equilibrium, ModeTable, Observable,
};
use crate::error::{Error, Result};
use crate::fourier::full_lattice;
use crate::model::{build_model, default_band, ModelSpec, ResonanceAudit, WeightSpec};
use crate::poly::{Polynomial, TrigPolynomial};
use crate::stats::{least_squares, log_space};

/// Usable points must exceed this multiple of their standard error.
pub const SIGNAL_FACTOR: f64 = 10.0;
pub const MIN_USABLE: usize = 5;
/// A run fails its rate check when the fitted slope is above this value.
pub const SLOPE_LIMIT: f64 = -0.7;
/// Monte Carlo and quadrature may differ by this many combined standard errors.
pub const DIVERGENCE_SIGMA: f64 = 5.0;
pub const DEGENERATE_STATUS: &str = "degenerate: constant mode only";

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    reference: Option<String>,
    dim: Option<usize>,
    band: Option<usize>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    hamiltonian: Option<Polynomial>,
    weight: Option<WeightSpec>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSection {
    profile: Option<ActionProfile>,
    angle_density: Option<TrigPolynomial>,
    observable: Option<Observable>,
    samples: Option<usize>,
    quad_nodes: Option<usize>,
    seed: Option<u64>,
    mode_band: Option<usize>,
    theta_grid: Option<usize>,
    cheb_nodes: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogGrid {
    start: f64,
    stop: f64,
    count: usize,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    times: Option<Vec<f64>>,
    log: Option<LogGrid>,
    mc_t_max: Option<f64>,
    mc_samples: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditSection {
    tau: Option<f64>,
    grid_n: Option<usize>,
    band: Option<usize>,
    conjugacy_grid: Option<usize>,
    roundtrip_samples: Option<usize>,
    mode_max: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: ModelSection,
    #[serde(default)]
    ensemble: EnsembleSection,
    #[serde(default)]
    grid: GridSection,
    #[serde(default)]
    audit: AuditSection,
}

/// Audit knobs after defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub tau: f64,
    pub grid_n: usize,
    /// Band of the resonance scan.
    pub band: usize,
    pub conjugacy_grid: usize,
    pub roundtrip_samples: usize,
    /// Per-mode audits cover 0 < |n|∞ ≤ mode_max.
    pub mode_max: usize,
}

/// A fully resolved run description; every default is filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub ensemble: EnsembleSpec,
    pub t_grid: Vec<f64>,
    /// Monte Carlo cross-checks run at grid times up to this value.
    pub mc_t_max: f64,
    pub mc_samples: usize,
    pub audit: AuditConfig,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), message: message.into() }
}

/// Reads and validates a TOML run description.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| config_error("", e.to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(&path, e.into_inner().message().trim().to_string())
    })?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let m = raw.model;
    let band = m.band.unwrap_or_else(default_band);
    let mut spec = match &m.reference {
        Some(name) if name == "unweighted" && m.lower.is_some() => {
            let lower = m.lower.clone().unwrap_or_default();
            let upper = m.upper.clone().ok_or_else(|| config_error("model.upper", "missing"))?;
            ModelSpec::unweighted(lower, upper, band)
        }
        Some(name) => ModelSpec::reference(name, band)
            .ok_or_else(|| config_error("model.reference", format!("unknown reference system `{name}`")))?,
        None => {
            let dim = m.dim.ok_or_else(|| config_error("model.dim", "missing (or give model.reference)"))?;
            ModelSpec {
                dim,
                band,
                lower: m.lower.clone().ok_or_else(|| config_error("model.lower", "missing"))?,
                upper: m.upper.clone().ok_or_else(|| config_error("model.upper", "missing"))?,
                hamiltonian: Polynomial::half_square_norm(dim),
                weight: m.weight.clone().ok_or_else(|| config_error("model.weight", "missing"))?,
            }
        }
    };
    if let Some(dim) = m.dim {
        if dim != spec.dim {
            return Err(config_error("model.dim", format!("{dim} does not match the reference system ({})", spec.dim)));
        }
    }
    if let Some(l) = m.lower {
        spec.lower = l;
    }
    if let Some(u) = m.upper {
        spec.upper = u;
    }
    if let Some(h) = m.hamiltonian {
        spec.hamiltonian = h;
    }
    if let Some(w) = m.weight {
        spec.weight = w;
    }
    let dim = spec.dim;
    if dim == 0 {
        return Err(config_error("model.dim", "must be at least 1"));
    }
    for (key, v) in [("model.lower", &spec.lower), ("model.upper", &spec.upper)] {
        if v.len() != dim {
            return Err(config_error(key, format!("expected {dim} entries, found {}", v.len())));
        }
    }
    for k in 0..dim {
        if !(spec.lower[k] < spec.upper[k]) {
            return Err(config_error(
                &format!("model.lower[{k}]"),
                format!("axis {k}: lower bound {} is not below upper bound {}", spec.lower[k], spec.upper[k]),
            ));
        }
    }
    spec.hamiltonian.check_dim(dim).map_err(|e| config_error("model.hamiltonian", e.to_string()))?;

    let e = raw.ensemble;
    let observable = e.observable.unwrap_or_else(|| Observable::cos_first(dim));
    observable.check_dim(dim).map_err(|err| config_error("ensemble.observable", err.to_string()))?;
    let angle_density = e.angle_density.unwrap_or_else(|| TrigPolynomial::constant(1.0));
    angle_density.check_dim(dim).map_err(|err| config_error("ensemble.angle_density", err.to_string()))?;
    let ensemble = EnsembleSpec {
        profile: e.profile.unwrap_or_default(),
        angle_density,
        observable,
        samples: e.samples.unwrap_or_else(default_samples),
        quad_nodes: e.quad_nodes.unwrap_or_else(default_quad_nodes),
        seed: e.seed.unwrap_or(0),
        mode_band: e.mode_band.unwrap_or_else(default_mode_band),
        theta_grid: e.theta_grid.unwrap_or_else(default_theta_grid),
        cheb_nodes: e.cheb_nodes.unwrap_or_else(default_cheb_nodes),
    };

    let g = raw.grid;
    let t_grid = match (g.times, g.log) {
        (Some(_), Some(_)) => return Err(config_error("grid", "give either `times` or `log`, not both")),
        (Some(t), None) => t,
        (None, Some(l)) => {
            if !(l.start > 0.0 && l.stop > l.start && l.count >= 2) {
                return Err(config_error("grid.log", "need 0 < start < stop and count >= 2"));
            }
            log_space(l.start, l.stop, l.count)
        }
        (None, None) => log_space(1.0, 1000.0, 32),
    };
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t >= 0.0)) || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config_error("grid.times", "times must be nonnegative and strictly increasing"));
    }

    let a = raw.audit;
    let tau = a.tau.unwrap_or(dim as f64);
    if !(tau >= dim as f64 - 1.0) {
        return Err(config_error(
            "audit.tau",
            format!("tau = {tau} violates the Diophantine constraint 2(N-1) <= 2 tau with N = {dim}"),
        ));
    }
    let audit = AuditConfig {
        tau,
        grid_n: a.grid_n.unwrap_or(8),
        band: a.band.unwrap_or(band),
        conjugacy_grid: a.conjugacy_grid.unwrap_or(4),
        roundtrip_samples: a.roundtrip_samples.unwrap_or(64),
        mode_max: a.mode_max.unwrap_or(3),
    };
    if audit.grid_n < 2 || audit.band == 0 || audit.conjugacy_grid == 0 {
        return Err(config_error("audit", "grid_n >= 2, band >= 1 and conjugacy_grid >= 1 are required"));
    }
    Ok(RunConfig {
        model: spec,
        mc_samples: g.mc_samples.unwrap_or(ensemble.samples),
        ensemble,
        t_grid,
        mc_t_max: g.mc_t_max.unwrap_or(10.0),
        audit,
    })
}

/// Least-squares power law on the dyadic-block upper envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub log_c: f64,
    /// Envelope points entering the fit.
    pub n_used: usize,
}

/// Fits log diff ≈ log C + slope·log t on the largest usable diff of each
/// dyadic block [t₀2^k, t₀2^{k+1}); usable means diff > 10·stderr.
pub fn fit_rate(t_grid: &[f64], diffs: &[f64], stderrs: &[f64]) -> Result<RateFit> {
    if t_grid.len() != diffs.len() || t_grid.len() != stderrs.len() {
        return Err(Error::Shape { expected: t_grid.len(), found: diffs.len().min(stderrs.len()) });
    }
    let usable: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(diffs)
        .zip(stderrs)
        .filter(|((t, d), s)| **t > 0.0 && **d > SIGNAL_FACTOR * **s && **d > 0.0)
        .map(|((t, d), _)| (*t, *d))
        .collect();
    if usable.len() < MIN_USABLE {
        return Err(Error::InsufficientSignal { usable: usable.len(), required: MIN_USABLE });
    }
    let t0 = usable[0].0;
    let mut blocks: Vec<(i32, f64, f64)> = Vec::new();
    for &(t, d) in &usable {
        let k = (t / t0).log2().floor() as i32;
        match blocks.last_mut() {
            Some(b) if b.0 == k => {
                if d > b.2 {
                    b.1 = t;
                    b.2 = d;
                }
            }
            _ => blocks.push((k, t, d)),
        }
    }
    if blocks.len() < 2 {
        return Err(Error::InsufficientSignal { usable: blocks.len(), required: 2 });
    }
    let pts: Vec<(f64, f64)> = blocks.iter().map(|b| (b.1.ln(), b.2.ln())).collect();
    let (slope, log_c, _) = least_squares(&pts);
    Ok(RateFit { slope, log_c, n_used: pts.len() })
}

/// sup over [10, 10³] of t·|𝓘_n(t)| against its value at t = 10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAudit {
    pub mode: Vec<i64>,
    pub at_10: f64,
    pub sup: f64,
    pub ratio: f64,
}

/// t·|𝓘_n(t)| on 24 log-spaced times in [10, 10³] for every 0 < |n|∞ ≤ mode_max
/// that the table holds.
pub fn mode_audits(table: &ModeTable, mode_max: usize) -> Result<Vec<ModeAudit>> {
    let zero = vec![0i64; table.dim];
    let probe = log_space(10.0, 1000.0, 24);
    full_lattice(table.dim, mode_max.min(table.band))
        .into_iter()
        .filter(|n| *n != zero)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|n| {
            let vals = probe
                .iter()
                .map(|&t| Ok(t * table.mode_integral(n, t)?.norm()))
                .collect::<Result<Vec<f64>>>()?;
            let sup = vals.iter().copied().fold(0.0, f64::max);
            Ok(ModeAudit { mode: n.clone(), at_10: vals[0], sup, ratio: sup / vals[0] })
        })
        .collect()
}

/// Monte Carlo and quadrature at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCheck {
    pub t: f64,
    pub mc: f64,
    pub mc_stderr: f64,
    pub quad: f64,
    pub quad_error: f64,
    pub sigmas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditStamps {
    pub resonance: ResonanceAudit,
    pub conjugacy: Option<ConjugacyAudit>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config: RunConfig,
    pub audit_stamps: AuditStamps,
    pub equilibrium: Option<Equilibrium>,
    pub t_grid: Vec<f64>,
    pub diffs: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Running max of t·diff.
    pub envelope: Vec<f64>,
    pub fitted_slope: Option<f64>,
    #[serde(rename = "fitted_logC")]
    pub fitted_log_c: Option<f64>,
    pub envelope_points: usize,
    pub mode_audits: Vec<ModeAudit>,
    pub estimator_checks: Vec<EstimatorCheck>,
    pub status: String,
    pub exit_code: i32,
}

impl ConvergenceReport {
    /// results.csv contents.
    pub fn csv(&self) -> String {
        let mut out = String::from("t,diff,stderr,envelope\n");
        for i in 0..self.t_grid.len() {
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e}\n",
                self.t_grid[i], self.diffs[i], self.stderrs[i], self.envelope[i]
            ));
        }
        out
    }

    /// sup t·diff over the grid divided by t·diff at the first grid time.
    pub fn envelope_ratio(&self) -> f64 {
        let first = self.t_grid[0] * self.diffs[0];
        self.envelope.last().copied().unwrap_or(0.0) / first
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::File::create(dir.join("results.csv"))?.write_all(self.csv().as_bytes())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn is_audit_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Resonance { .. }
            | Error::Degeneracy { .. }
            | Error::SmallDivisor { .. }
            | Error::DiffeomorphismViolation { .. }
            | Error::InversionFailure { .. }
    )
}

/// Parses `config_path`, runs, and writes results.csv and report.json to `out_dir`.
pub fn run_experiment(config_path: &Path, out_dir: &Path) -> Result<ConvergenceReport> {
    let config = parse_config(config_path)?;
    let report = run(&config)?;
    report.write(out_dir)?;
    Ok(report)
}

/// The whole pipeline for a resolved config. Audit failures, rate failures and
/// estimator divergence are reported through `status` and `exit_code`.
pub fn run(config: &RunConfig) -> Result<ConvergenceReport> {
    let model = build_model(&config.model)?;
    let a = &config.audit;
    let resonance = model.resonance_scan(a.band, a.grid_n, a.tau)?;
    let mut report = ConvergenceReport {
        config: config.clone(),
        audit_stamps: AuditStamps { resonance: resonance.clone(), conjugacy: None, failure: None },
        equilibrium: None,
        t_grid: config.t_grid.clone(),
        diffs: vec![],
        stderrs: vec![],
        envelope: vec![],
        fitted_slope: None,
        fitted_log_c: None,
        envelope_points: 0,
        mode_audits: vec![],
        estimator_checks: vec![],
        status: String::new(),
        exit_code: 0,
    };
    let abort = |mut report: ConvergenceReport, err: Error| {
        report.audit_stamps.failure = Some(err.to_string());
        report.status = format!("audit failure: {err}");
        report.exit_code = 2;
        report
    };
    if let Err(err) = resonance.into_result() {
        return Ok(abort(report, err));
    }
    match conjugacy_audit(&model, a.conjugacy_grid, a.roundtrip_samples, config.ensemble.seed) {
        Ok(c) => report.audit_stamps.conjugacy = Some(c),
        Err(err) if is_audit_error(&err) => return Ok(abort(report, err)),
        Err(err) => return Err(err),
    }

    let ens = Ensemble::new(&model, config.ensemble.clone())?;
    let eq = ens.expect_eq()?;
    report.equilibrium = Some(eq);
    let table = ens.mode_table()?;
    let quad_error = table.error_estimate();
    let devs = config
        .t_grid
        .par_iter()
        .map(|&t| table.deviation(t))
        .collect::<Result<Vec<_>>>()?;
    report.diffs = devs.iter().map(|d| d.re.abs()).collect();
    report.stderrs = devs.iter().map(|d| quad_error + d.im.abs()).collect();
    let mut running = 0.0f64;
    report.envelope = config
        .t_grid
        .iter()
        .zip(&report.diffs)
        .map(|(t, d)| {
            running = running.max(t * d);
            running
        })
        .collect();

    report.mode_audits = mode_audits(&table, a.mode_max)?;

    let mc_times: Vec<f64> = config.t_grid.iter().copied().filter(|t| *t <= config.mc_t_max).collect();
    if !mc_times.is_empty() && config.mc_samples > 0 {
        let eq_modes = table.equilibrium()?.re;
        let mc = ens.expect_mc(&mc_times, config.mc_samples, config.ensemble.seed)?;
        for (t, est) in mc_times.iter().zip(mc) {
            let j = config.t_grid.iter().position(|x| x == t).expect("time from grid");
            let quad = eq_modes + devs[j].re;
            let combined = (est.stderr.powi(2) + quad_error.powi(2)).sqrt();
            let gap = (est.mean - quad).abs();
            let sigmas = if gap == 0.0 { 0.0 } else { gap / combined };
            report.estimator_checks.push(EstimatorCheck {
                t: *t,
                mc: est.mean,
                mc_stderr: est.stderr,
                quad,
                quad_error,
                sigmas,
            });
            if sigmas > DIVERGENCE_SIGMA {
                let err = Error::EstimatorDivergence { time: *t, mc: est.mean, stderr: est.stderr, quad };
                report.status = err.to_string();
                report.exit_code = 4;
                return Ok(report);
            }
        }
    }

    if config.ensemble.observable.is_angle_independent() {
        report.status = DEGENERATE_STATUS.to_string();
        return Ok(report);
    }
    match fit_rate(&config.t_grid, &report.diffs, &report.stderrs) {
        Ok(fit) => {
            report.fitted_slope = Some(fit.slope);
            report.fitted_log_c = Some(fit.log_c);
            report.envelope_points = fit.n_used;
            if fit.slope > SLOPE_LIMIT {
                report.status = format!("rate failure: slope {:.3} > {SLOPE_LIMIT}", fit.slope);
                report.exit_code = 3;
            } else {
                report.status = "pass".to_string();
            }
        }
        Err(err @ Error::InsufficientSignal { .. }) => {
            report.status = format!("rate failure: {err}");
            report.exit_code = 3;
        }
        Err(err) => return Err(err),
    }
    Ok(report)
}
