//! Config-driven experiment runner.
//!
//! A JSON config names one experiment; unspecified fields take documented
//! defaults, and every value that affects the output is echoed in the run
//! manifest. Rows are written as long-format CSV with header
//! `experiment,run,step,metric,value,stderr,seed`.
//!
//! Streams derive from `master_seed`: the covariance (if any) from
//! `(master_seed, 1)`, run `i` from `(master_seed, 2).substream(i)` with its
//! initialisation on sub-stream 0 and its data on sub-stream 1, and Monte
//! Carlo diagnostics from `(master_seed, 3)`. Sweeps reuse the same run
//! streams at every sweep value.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::AttnParam;
use crate::distrib::{concentration_sweep, w2_convergence_probe};
use crate::error::Error;
use crate::icl::{alpha_star, icl_coefficients, icl_landscape, icl_sgd, predicted_rate_icl, IclInfObjective, SpikedWishartModel};
use crate::landscape::{critical_points_lin, critical_points_soft_inf, predicted_rate_soft_inf, verify_finite_prompt_landscape, CriticalKind, CriticalPoint};
use crate::optim::{
    gradient_descent, oja_equivalence_check, random_unit_vector, sgd_finite_prompt, sgd_finite_prompt_linear, OptTrace, OptimizerConfig, SoftInfObjective,
};
use crate::risk::risk_lin_finite;
use crate::spectra::{build_experiment_covariance, CovarianceModel, RngStream};

pub const COV_STREAM: u64 = 1;
pub const RUN_STREAM: u64 = 2;
pub const MC_STREAM: u64 = 3;

/// Automatic horizons integrate this many time constants of the slowest
/// local mode at the minimiser.
pub const HORIZON_TIME_CONSTANTS: f64 = 5.0;
pub const MAX_AUTO_ITERS: usize = 1_000_000;

pub const CSV_HEADER: [&str; 7] = ["experiment", "run", "step", "metric", "value", "stderr", "seed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    AlignSoftFinite,
    AlignSoftInf,
    AlignLinFinite,
    AlignLinInf,
    #[serde(rename = "sweep_L")]
    SweepL,
    SweepD,
    IclAlignFinite,
    IclAlignInf,
    #[serde(rename = "icl_sweep_L")]
    IclSweepL,
    IclSweepD,
    LandscapeReport,
    Concentration,
    W2Probe,
    OjaCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 14] = [
        Experiment::AlignSoftFinite,
        Experiment::AlignSoftInf,
        Experiment::AlignLinFinite,
        Experiment::AlignLinInf,
        Experiment::SweepL,
        Experiment::SweepD,
        Experiment::IclAlignFinite,
        Experiment::IclAlignInf,
        Experiment::IclSweepL,
        Experiment::IclSweepD,
        Experiment::LandscapeReport,
        Experiment::Concentration,
        Experiment::W2Probe,
        Experiment::OjaCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::AlignSoftFinite => "align_soft_finite",
            Experiment::AlignSoftInf => "align_soft_inf",
            Experiment::AlignLinFinite => "align_lin_finite",
            Experiment::AlignLinInf => "align_lin_inf",
            Experiment::SweepL => "sweep_L",
            Experiment::SweepD => "sweep_d",
            Experiment::IclAlignFinite => "icl_align_finite",
            Experiment::IclAlignInf => "icl_align_inf",
            Experiment::IclSweepL => "icl_sweep_L",
            Experiment::IclSweepD => "icl_sweep_d",
            Experiment::LandscapeReport => "landscape_report",
            Experiment::Concentration => "concentration",
            Experiment::W2Probe => "w2_probe",
            Experiment::OjaCheck => "oja_check",
        }
    }

    fn is_icl(self) -> bool {
        matches!(self, Experiment::IclAlignFinite | Experiment::IclAlignInf | Experiment::IclSweepL | Experiment::IclSweepD)
    }

    /// Optional fields this experiment reads, besides `experiment`,
    /// `master_seed` and `output_path`.
    fn fields(self) -> &'static [&'static str] {
        use Experiment::*;
        match self {
            AlignSoftFinite | AlignLinFinite => &["d", "lambda", "step_size", "iters", "batch", "prompt_length", "runs", "record_every"],
            AlignSoftInf => &["d", "lambda", "step_size", "iters", "runs", "record_every"],
            AlignLinInf => &["d", "lambda", "step_size", "iters", "runs", "record_every"],
            SweepL => &["d", "lambda", "step_size", "iters", "batch", "l_list", "runs", "operator"],
            SweepD => &["lambda", "step_size", "iters", "batch", "prompt_length", "d_list", "runs", "operator"],
            IclAlignFinite => &["d", "lambda", "step_size", "iters", "batch", "prompt_length", "runs", "xi2", "theta", "n", "record_every"],
            IclAlignInf => &["d", "lambda", "step_size", "iters", "runs", "xi2", "theta", "n", "record_every"],
            IclSweepL => &["d", "lambda", "step_size", "iters", "batch", "l_list", "runs", "xi2", "theta", "n"],
            IclSweepD => &["lambda", "step_size", "iters", "batch", "prompt_length", "d_list", "runs", "xi2", "theta", "n"],
            LandscapeReport => &["d", "lambda", "prompt_length", "l_list", "samples", "xi2", "theta", "n"],
            Concentration => &["d", "lambda", "l_list", "samples", "orders"],
            W2Probe => &["d", "lambda", "l_list", "samples"],
            OjaCheck => &["d", "lambda", "horizon", "dt"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Softmax,
    Linear,
}

/// The config file as written. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub d: Option<usize>,
    pub lambda: Option<f64>,
    pub step_size: Option<f64>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub prompt_length: Option<usize>,
    #[serde(alias = "L_list")]
    pub l_list: Option<Vec<usize>>,
    pub d_list: Option<Vec<usize>>,
    pub runs: Option<usize>,
    pub master_seed: Option<u64>,
    pub xi2: Option<f64>,
    pub theta: Option<f64>,
    pub n: Option<usize>,
    pub samples: Option<usize>,
    pub orders: Option<Vec<usize>>,
    pub operator: Option<AttentionKind>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub record_every: Option<usize>,
    pub output_path: Option<String>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self { experiment: Some(experiment), ..Self::default() }
    }

    fn present(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! check {
            ($($f:ident),*) => { $( if self.$f.is_some() { out.push(stringify!($f)); } )* };
        }
        check!(d, lambda, step_size, iters, batch, prompt_length, l_list, d_list, runs, xi2, theta, n, samples, orders, operator, horizon, dt, record_every);
        out
    }
}

/// Per-dimension values of a `sweep_d` study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaledDefaults {
    pub d: usize,
    pub step_size: f64,
    pub lambda: f64,
    pub prompt_length: usize,
    /// Wishart degrees of freedom (ICL only).
    pub n: Option<usize>,
}

/// Dimension-scaled step size and temperature for the `sweep_d` variants:
/// `gamma = 0.5 / d^2`, `lambda = 0.1 / d` for softmax (and ICL, with
/// `n = d`); `gamma = 1 / d^2`, `lambda = 0.01 / d`, `L = d` for linear.
/// `prompt_length` is the value used when the rule does not fix it.
pub fn scaled_defaults(experiment: Experiment, operator: AttentionKind, d: usize, prompt_length: usize) -> Option<ScaledDefaults> {
    let df = d as f64;
    match (experiment, operator) {
        (Experiment::SweepD, AttentionKind::Softmax) => Some(ScaledDefaults { d, step_size: 0.5 / (df * df), lambda: 0.1 / df, prompt_length, n: None }),
        (Experiment::SweepD, AttentionKind::Linear) => Some(ScaledDefaults { d, step_size: 1.0 / (df * df), lambda: 0.01 / df, prompt_length: d, n: None }),
        (Experiment::IclSweepD, _) => Some(ScaledDefaults { d, step_size: 0.5 / (df * df), lambda: 0.1 / df, prompt_length, n: Some(d) }),
        _ => None,
    }
}

/// `n` values from `lo` to `hi` inclusive, evenly spaced and rounded.
pub fn even_lengths(lo: usize, hi: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| lo + ((hi - lo) as f64 * i as f64 / (n - 1) as f64).round() as usize).collect()
}

/// A config with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub experiment: Experiment,
    pub d: usize,
    pub lambda: f64,
    pub step_size: f64,
    pub iters: usize,
    pub batch: usize,
    pub prompt_length: usize,
    pub l_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub runs: usize,
    pub master_seed: u64,
    pub xi2: f64,
    pub theta: f64,
    pub n: usize,
    pub samples: usize,
    pub orders: Vec<usize>,
    pub operator: AttentionKind,
    pub horizon: f64,
    pub dt: f64,
    pub record_every: usize,
    pub output_path: String,
    /// Slowest local rate at the minimiser when `iters` was set from it.
    pub predicted_rate: Option<f64>,
    pub per_dimension: Vec<ScaledDefaults>,
    /// Fields filled from defaults rather than the config.
    pub defaulted: Vec<String>,
    pub seed_source: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("run {run} failed at iteration {iter}: non-finite value")]
    Numeric { run: usize, iter: usize },
    #[error("run {run}: {source}")]
    Library { run: usize, source: Error },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric { .. } | CliError::Library { .. } => 3,
            CliError::Io(_) => 1,
        }
    }

    fn from_run(run: usize, e: Error) -> Self {
        match e {
            Error::NonFinite { iter } => CliError::Numeric { run, iter },
            source => CliError::Library { run, source },
        }
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn key_line(text: &str, key: &str) -> usize {
    let pat = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&pat)).map_or(1, |i| i + 1)
}

/// Parses a config file body. `origin` prefixes error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
}

/// Parses and resolves a config, naming the offending line on failure.
pub fn load_config(text: &str, origin: &str, seed_override: Option<u64>) -> Result<ResolvedConfig, CliError> {
    let raw = parse_config(text, origin)?;
    resolve(&raw, seed_override).map_err(|e| match e {
        CliError::Config(msg) => {
            let key = msg.split('`').nth(1).unwrap_or("experiment");
            CliError::Config(format!("{origin}:{}: {msg}", key_line(text, key)))
        }
        other => other,
    })
}

fn bad(field: &str, why: &str) -> CliError {
    CliError::Config(format!("field `{field}` {why}"))
}

fn positive_f(field: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(bad(field, &format!("must be a finite number > 0, got {x}"))),
        _ => Ok(()),
    }
}

fn positive_u(field: &str, v: Option<usize>) -> Result<(), CliError> {
    match v {
        Some(0) => Err(bad(field, "must be >= 1")),
        _ => Ok(()),
    }
}

fn ascending(field: &str, v: &Option<Vec<usize>>, min_len: usize) -> Result<(), CliError> {
    if let Some(list) = v {
        if list.len() < min_len {
            return Err(bad(field, &format!("needs at least {min_len} entries")));
        }
        if list.first() == Some(&0) || list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad(field, "must be positive and strictly ascending"));
        }
    }
    Ok(())
}

/// Smallest Hessian eigenvalue at the minimiser of the closed-form risk
/// matching the experiment.
fn minimiser_rate(kind: AttentionKind, cov: &CovarianceModel, lambda: f64, len: usize) -> Result<f64, Error> {
    match kind {
        AttentionKind::Softmax => predicted_rate_soft_inf(cov, lambda),
        AttentionKind::Linear => {
            let points = critical_points_lin(cov, lambda, len)?;
            let min = points
                .iter()
                .filter(|p| p.kind == CriticalKind::LocalMin)
                .min_by(|a, b| a.value.total_cmp(&b.value))
                .ok_or_else(|| Error::InvalidArgument("linear risk has no local minimiser".into()))?;
            let h = risk_lin_finite(&AttnParam::new(min.location.clone(), lambda)?, cov, len)?;
            Ok(crate::landscape::ascending_spectrum(h.hess())?[0])
        }
    }
}

fn auto_iters(rate: f64, step: f64, warnings: &mut Vec<String>) -> usize {
    let t = (HORIZON_TIME_CONSTANTS / (step * rate)).ceil();
    if !(t.is_finite()) || t > MAX_AUTO_ITERS as f64 {
        warnings.push(format!("automatic horizon {t} capped at {MAX_AUTO_ITERS} iterations"));
        return MAX_AUTO_ITERS;
    }
    (t as usize).max(1)
}

/// Fills defaults and validates. `seed_override` (from `ATTN_PCA_SEED`)
/// replaces `master_seed`.
pub fn resolve(raw: &ExperimentConfig, seed_override: Option<u64>) -> Result<ResolvedConfig, CliError> {
    let exp = raw.experiment.ok_or_else(|| bad("experiment", "is required"))?;
    let allowed = exp.fields();
    for f in raw.present() {
        if !allowed.contains(&f) {
            return Err(bad(f, &format!("does not apply to experiment {}", exp.name())));
        }
    }
    for (f, v) in [("lambda", raw.lambda), ("step_size", raw.step_size), ("xi2", raw.xi2), ("theta", raw.theta), ("horizon", raw.horizon), ("dt", raw.dt)] {
        positive_f(f, v)?;
    }
    for (f, v) in [
        ("d", raw.d),
        ("iters", raw.iters),
        ("batch", raw.batch),
        ("prompt_length", raw.prompt_length),
        ("runs", raw.runs),
        ("n", raw.n),
        ("samples", raw.samples),
        ("record_every", raw.record_every),
    ] {
        positive_u(f, v)?;
    }
    let min_l = if exp == Experiment::Concentration { 3 } else { 1 };
    ascending("l_list", &raw.l_list, min_l)?;
    ascending("d_list", &raw.d_list, 1)?;
    if let Some(o) = &raw.orders {
        if o.is_empty() || o.iter().any(|&k| k > 2) {
            return Err(bad("orders", "must be a non-empty list drawn from 0, 1, 2"));
        }
    }
    if let (Some(h), Some(dt)) = (raw.horizon, raw.dt) {
        if dt > h {
            return Err(bad("dt", "must not exceed horizon"));
        }
    }

    let mut defaulted = Vec::new();
    macro_rules! or_default {
        ($field:ident, $value:expr) => {
            match raw.$field.clone() {
                Some(v) => v,
                None => {
                    defaulted.push(stringify!($field).to_string());
                    $value
                }
            }
        };
    }

    let linear = matches!(exp, Experiment::AlignLinFinite | Experiment::AlignLinInf);
    let d = or_default!(d, if exp == Experiment::Concentration { 4 } else { 5 });
    let operator = or_default!(operator, if linear { AttentionKind::Linear } else { AttentionKind::Softmax });
    let lambda = or_default!(lambda, if linear { 0.01 / d as f64 } else { 0.1 });
    let step_size = or_default!(step_size, if linear { 1.0 / (d * d) as f64 } else { 1e-4 });
    let prompt_length = or_default!(prompt_length, if exp == Experiment::AlignLinFinite { d } else { 100 });
    let batch = or_default!(batch, 256);
    let runs = or_default!(runs, 10);
    let xi2 = or_default!(xi2, 1.0);
    let theta = or_default!(theta, 2.0);
    let n = or_default!(n, if exp == Experiment::IclSweepD { 0 } else { 10 });
    let l_list = or_default!(
        l_list,
        match exp {
            Experiment::SweepL | Experiment::IclSweepL => even_lengths(3, 50, 20),
            Experiment::Concentration => vec![10, 100, 1000, 10_000],
            Experiment::W2Probe => vec![10, 100, 1000],
            _ => Vec::new(),
        }
    );
    let d_list = or_default!(d_list, if matches!(exp, Experiment::SweepD | Experiment::IclSweepD) { vec![5, 10, 20] } else { Vec::new() });
    let samples = or_default!(
        samples,
        match exp {
            // The empirical 1-D W2 floor is about 1.6e-3 sigma_1 at 2000 samples.
            Experiment::W2Probe => 100_000,
            // Order-2 errors decay slowly; fewer samples cannot order L = 10 and L = 100.
            Experiment::LandscapeReport | Experiment::Concentration => 20_000,
            _ => 1000,
        }
    );
    let orders = or_default!(orders, vec![0, 1, 2]);
    let horizon = or_default!(horizon, 5.0);
    let dt = or_default!(dt, 1e-3);
    let record_every = or_default!(record_every, 100);
    let output_path = or_default!(output_path, "results".to_string());
    let (master_seed, seed_source) = match (seed_override, raw.master_seed) {
        (Some(s), _) => (s, "ATTN_PCA_SEED".to_string()),
        (None, Some(s)) => (s, "config".to_string()),
        (None, None) => {
            defaulted.push("master_seed".into());
            (0, "default".to_string())
        }
    };
    if exp.is_icl() && exp != Experiment::IclSweepD && n == 0 {
        return Err(bad("n", "must be >= 1"));
    }
    if exp == Experiment::LandscapeReport && raw.l_list.is_some() && d < 2 {
        return Err(bad("d", "must be >= 2 for the finite-prompt search"));
    }

    let per_dimension: Vec<ScaledDefaults> = d_list
        .iter()
        .map(|&dd| {
            let base = scaled_defaults(exp, operator, dd, prompt_length).expect("sweep_d variant");
            ScaledDefaults {
                d: dd,
                step_size: raw.step_size.unwrap_or(base.step_size),
                lambda: raw.lambda.unwrap_or(base.lambda),
                prompt_length: raw.prompt_length.unwrap_or(base.prompt_length),
                n: base.n.map(|b| raw.n.unwrap_or(b)),
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let mut predicted_rate = None;
    let iters = match raw.iters {
        Some(t) => t,
        None => {
            defaulted.push("iters".into());
            match exp {
                Experiment::AlignSoftFinite | Experiment::AlignSoftInf | Experiment::AlignLinFinite | Experiment::AlignLinInf => {
                    let cov = experiment_covariance(d, master_seed).map_err(|e| CliError::Library { run: 0, source: e })?;
                    let kind = if exp == Experiment::AlignLinFinite { AttentionKind::Linear } else { AttentionKind::Softmax };
                    let rate = minimiser_rate(kind, &cov, lambda, prompt_length).map_err(|e| CliError::Library { run: 0, source: e })?;
                    predicted_rate = Some(rate);
                    auto_iters(rate, step_size, &mut warnings)
                }
                Experiment::IclAlignFinite | Experiment::IclAlignInf => {
                    let model = SpikedWishartModel::canonical(d, xi2, theta, n).map_err(|e| CliError::Library { run: 0, source: e })?;
                    let rate = predicted_rate_icl(&model, lambda).0;
                    predicted_rate = Some(rate);
                    auto_iters(rate, step_size, &mut warnings)
                }
                Experiment::SweepL | Experiment::SweepD => 5000,
                Experiment::IclSweepL | Experiment::IclSweepD => 2000,
                _ => 0,
            }
        }
    };
    for w in warnings {
        warn!("{w}");
    }
    Ok(ResolvedConfig {
        experiment: exp,
        d,
        lambda,
        step_size,
        iters,
        batch,
        prompt_length,
        l_list,
        d_list,
        runs,
        master_seed,
        xi2,
        theta,
        n,
        samples,
        orders,
        operator,
        horizon,
        dt,
        record_every,
        output_path,
        predicted_rate,
        per_dimension,
        defaulted,
        seed_source,
    })
}

/// The covariance shared by all runs of a fixed-Sigma experiment.
pub fn experiment_covariance(d: usize, master_seed: u64) -> Result<CovarianceModel, Error> {
    let cov = build_experiment_covariance(d, RngStream::new(master_seed, COV_STREAM))?;
    cov.require_simple_spectrum()?;
    Ok(cov)
}

fn sweep_covariance(d: usize, master_seed: u64) -> Result<CovarianceModel, Error> {
    let cov = build_experiment_covariance(d, RngStream::new(master_seed, COV_STREAM).substream(d as u64))?;
    cov.require_simple_spectrum()?;
    Ok(cov)
}

/// `(initialisation, data)` streams of run `i`.
pub fn run_streams(master_seed: u64, run: usize) -> (RngStream, RngStream) {
    let s = RngStream::new(master_seed, RUN_STREAM).substream(run as u64);
    (s.substream(0), s.substream(1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: &'static str,
    pub run: usize,
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub warnings: Vec<String>,
    /// Sweep values skipped because the time budget ran out.
    pub skipped: Vec<usize>,
}

struct RowSink<'a> {
    cfg: &'a ResolvedConfig,
    run: usize,
    rows: Vec<ResultRow>,
}

impl<'a> RowSink<'a> {
    fn new(cfg: &'a ResolvedConfig, run: usize) -> Self {
        Self { cfg, run, rows: Vec::new() }
    }

    fn push(&mut self, step: u64, metric: impl Into<String>, value: f64, stderr: Option<f64>) {
        self.rows.push(ResultRow {
            experiment: self.cfg.experiment.name(),
            run: self.run,
            step,
            metric: metric.into(),
            value,
            stderr,
            seed: self.cfg.master_seed,
        });
    }

    fn trace(&mut self, trace: &OptTrace, risk_name: &str) {
        let every = self.cfg.record_every;
        for (k, a) in trace.alignment.iter().enumerate() {
            if k % every == 0 || k == trace.iterations {
                self.push(k as u64, "alignment", *a, None);
                if let Some(r) = trace.risk_values.get(k) {
                    self.push(k as u64, risk_name, *r, None);
                }
            }
        }
        self.final_rows(trace.iterations as u64, trace);
    }

    fn final_rows(&mut self, step: u64, trace: &OptTrace) {
        self.push(step, "final_alignment", trace.final_alignment(), None);
        self.push(step, "final_norm", trace.final_mu.norm(), None);
    }
}

fn map_runs(cfg: &ResolvedConfig, f: impl Fn(usize, &mut RowSink) -> Result<(), Error> + Sync) -> Result<Vec<ResultRow>, CliError> {
    let parts: Vec<Result<Vec<ResultRow>, CliError>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut sink = RowSink::new(cfg, run);
            f(run, &mut sink).map_err(|e| CliError::from_run(run, e))?;
            Ok(sink.rows)
        })
        .collect();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

fn sgd_config(step: f64, iters: usize, batch: usize, len: usize, data: RngStream) -> OptimizerConfig {
    let mut c = OptimizerConfig::stochastic(step, iters, batch, len, data);
    c.store_stride = iters.max(1);
    c
}

fn det_config(step: f64, iters: usize) -> OptimizerConfig {
    let mut c = OptimizerConfig::deterministic(step, iters);
    c.store_stride = iters.max(1);
    c
}

fn lib(e: Error) -> CliError {
    CliError::from_run(0, e)
}

/// Executes a resolved experiment. `budget_seconds` bounds sweeps: once it
/// is exhausted, remaining sweep values are skipped with a warning.
pub fn run_experiment(cfg: &ResolvedConfig, budget_seconds: Option<f64>) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let mut out = RunOutput::default();
    match cfg.experiment {
        Experiment::AlignSoftFinite | Experiment::AlignLinFinite => {
            let cov = experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?;
            let target = cov.eigenvector(0);
            out.rows = map_runs(cfg, |run, sink| {
                let (init, data) = run_streams(cfg.master_seed, run);
                let p = AttnParam::new(random_unit_vector(cfg.d, init), cfg.lambda)?;
                let c = sgd_config(cfg.step_size, cfg.iters, cfg.batch, cfg.prompt_length, data);
                let t = match cfg.operator {
                    AttentionKind::Softmax => sgd_finite_prompt(&cov, &p, &c, &target)?,
                    AttentionKind::Linear => sgd_finite_prompt_linear(&cov, &p, &c, &target)?,
                };
                sink.trace(&t, "batch_risk");
                Ok(())
            })?;
        }
        Experiment::AlignSoftInf | Experiment::AlignLinInf => {
            let cov = experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?;
            let target = cov.eigenvector(0);
            let obj = SoftInfObjective { cov: &cov, lambda: cfg.lambda };
            out.rows = map_runs(cfg, |run, sink| {
                let (init, _) = run_streams(cfg.master_seed, run);
                let t = gradient_descent(&obj, &random_unit_vector(cfg.d, init), &det_config(cfg.step_size, cfg.iters), &target)?;
                sink.trace(&t, "risk");
                Ok(())
            })?;
        }
        Experiment::IclAlignFinite | Experiment::IclAlignInf => {
            let model = SpikedWishartModel::canonical(cfg.d, cfg.xi2, cfg.theta, cfg.n).map_err(lib)?;
            let finite = cfg.experiment == Experiment::IclAlignFinite;
            out.rows = map_runs(cfg, |run, sink| {
                let (init, data) = run_streams(cfg.master_seed, run);
                let mu0 = random_unit_vector(cfg.d, init);
                let t = if finite {
                    icl_sgd(&model, &AttnParam::new(mu0, cfg.lambda)?, &sgd_config(cfg.step_size, cfg.iters, cfg.batch, cfg.prompt_length, data))?
                } else {
                    let obj = IclInfObjective { model: &model, lambda: cfg.lambda };
                    gradient_descent(&obj, &mu0, &det_config(cfg.step_size, cfg.iters), &model.spike)?
                };
                sink.trace(&t, if finite { "batch_risk" } else { "risk" });
                Ok(())
            })?;
        }
        Experiment::SweepL | Experiment::IclSweepL | Experiment::SweepD | Experiment::IclSweepD => run_sweep(cfg, budget_seconds, start, &mut out)?,
        Experiment::LandscapeReport => out.rows = landscape_rows(cfg)?,
        Experiment::Concentration => {
            let cov = experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?;
            let (s1, u1) = cov.principal();
            let param = AttnParam::new(u1 / (cfg.lambda * s1).sqrt(), cfg.lambda).map_err(lib)?;
            let mut sink = RowSink::new(cfg, 0);
            for &k in &cfg.orders {
                let t = concentration_sweep(&cov, &param, k, &cfg.l_list, cfg.samples, RngStream::new(cfg.master_seed, MC_STREAM).substream(k as u64)).map_err(lib)?;
                for r in &t.rows {
                    sink.push(r.len as u64, format!("error_k{k}"), r.estimate, Some(r.std_error));
                    sink.push(r.len as u64, format!("bound_k{k}"), r.bound, None);
                    sink.push(r.len as u64, format!("bound_alt_k{k}"), r.bound_alt, None);
                }
                sink.push(0, format!("slope_k{k}"), t.slope, None);
                sink.push(0, format!("epsilon_k{k}"), t.epsilon, None);
                sink.push(0, format!("epsilon_alt_k{k}"), t.epsilon_alt, None);
            }
            out.rows = sink.rows;
        }
        Experiment::W2Probe => {
            let cov = experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?;
            let t = w2_convergence_probe(&cov, cfg.lambda, &cfg.l_list, cfg.samples, RngStream::new(cfg.master_seed, MC_STREAM)).map_err(lib)?;
            let mut sink = RowSink::new(cfg, 0);
            for r in &t.rows {
                sink.push(r.len as u64, "bures_surrogate", r.bures_surrogate, None);
                sink.push(r.len as u64, "projected_exact", r.projected_exact, None);
            }
            out.rows = sink.rows;
        }
        Experiment::OjaCheck => {
            let cov = experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?;
            let (init, _) = run_streams(cfg.master_seed, 0);
            let r = oja_equivalence_check(&cov, cfg.lambda, &random_unit_vector(cfg.d, init), cfg.horizon, cfg.dt).map_err(lib)?;
            let mut sink = RowSink::new(cfg, 0);
            sink.push(r.steps as u64, "same_scheme_gap", r.same_scheme_gap, None);
            sink.push(r.steps as u64, "euler_error", r.euler_error, None);
            sink.push(r.steps as u64, "euler_error_half", r.euler_error_half, None);
            sink.push(r.steps as u64, "richardson_ratio", r.richardson_ratio, None);
            sink.push(r.steps as u64, "stationary_residual", r.stationary_residual, None);
            out.rows = sink.rows;
        }
    }
    Ok(out)
}

fn run_sweep(cfg: &ResolvedConfig, budget: Option<f64>, start: Instant, out: &mut RunOutput) -> Result<(), CliError> {
    let by_length = matches!(cfg.experiment, Experiment::SweepL | Experiment::IclSweepL);
    let values: Vec<usize> = if by_length { cfg.l_list.clone() } else { cfg.d_list.clone() };
    let fixed_cov = if cfg.experiment == Experiment::SweepL { Some(experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?) } else { None };
    for (idx, &value) in values.iter().enumerate() {
        if let (Some(b), true) = (budget, idx > 0) {
            if start.elapsed().as_secs_f64() > b {
                out.skipped = values[idx..].to_vec();
                out.warnings.push(format!("time budget of {b} s exhausted; skipped sweep values {:?}", out.skipped));
                warn!("{}", out.warnings.last().unwrap());
                break;
            }
        }
        let (d, step, lambda, len, n) = if by_length {
            (cfg.d, cfg.step_size, cfg.lambda, value, cfg.n)
        } else {
            let s = cfg.per_dimension[idx];
            (s.d, s.step_size, s.lambda, s.prompt_length, s.n.unwrap_or(cfg.n))
        };
        let rows = if cfg.experiment.is_icl() {
            let model = SpikedWishartModel::canonical(d, cfg.xi2, cfg.theta, n).map_err(lib)?;
            map_runs(cfg, |run, sink| {
                let (init, data) = run_streams(cfg.master_seed, run);
                let p = AttnParam::new(random_unit_vector(d, init), lambda)?;
                let t = icl_sgd(&model, &p, &sgd_config(step, cfg.iters, cfg.batch, len, data))?;
                sink.final_rows(value as u64, &t);
                Ok(())
            })?
        } else {
            let cov = match &fixed_cov {
                Some(c) => c.clone(),
                None => sweep_covariance(d, cfg.master_seed).map_err(lib)?,
            };
            let target = cov.eigenvector(0);
            map_runs(cfg, |run, sink| {
                let (init, data) = run_streams(cfg.master_seed, run);
                let p = AttnParam::new(random_unit_vector(d, init), lambda)?;
                let c = sgd_config(step, cfg.iters, cfg.batch, len, data);
                let t = match cfg.operator {
                    AttentionKind::Softmax => sgd_finite_prompt(&cov, &p, &c, &target)?,
                    AttentionKind::Linear => sgd_finite_prompt_linear(&cov, &p, &c, &target)?,
                };
                sink.final_rows(value as u64, &t);
                Ok(())
            })?
        };
        out.rows.extend(rows);
    }
    Ok(())
}

fn point_rows(sink: &mut RowSink, prefix: &str, index: usize, p: &CriticalPoint) {
    let step = index as u64;
    sink.push(step, format!("{prefix}_value"), p.value, None);
    sink.push(step, format!("{prefix}_grad_norm"), p.grad_norm, None);
    sink.push(step, format!("{prefix}_kind_{}", p.kind.as_str()), 1.0, None);
    sink.push(step, format!("{prefix}_norm"), p.location.norm(), None);
    for (j, h) in p.hessian_spectrum.iter().enumerate() {
        sink.push(step, format!("{prefix}_hessian_eig{j}"), *h, None);
    }
}

fn landscape_rows(cfg: &ResolvedConfig) -> Result<Vec<ResultRow>, CliError> {
    let cov = experiment_covariance(cfg.d, cfg.master_seed).map_err(lib)?;
    let mut sink = RowSink::new(cfg, 0);
    for (i, p) in critical_points_soft_inf(&cov, cfg.lambda).map_err(lib)?.iter().enumerate() {
        point_rows(&mut sink, "soft", i, p);
    }
    sink.push(0, "soft_predicted_rate", predicted_rate_soft_inf(&cov, cfg.lambda).map_err(lib)?, None);
    for (i, p) in critical_points_lin(&cov, cfg.lambda, cfg.prompt_length).map_err(lib)?.iter().enumerate() {
        point_rows(&mut sink, "lin", i, p);
    }
    let model = SpikedWishartModel::canonical(cfg.d, cfg.xi2, cfg.theta, cfg.n).map_err(lib)?;
    let set = icl_landscape(&model, cfg.lambda).map_err(lib)?;
    point_rows(&mut sink, "icl_origin", 0, &set.origin);
    for (i, p) in set.aligned.iter().enumerate() {
        point_rows(&mut sink, "icl_aligned", i, p);
    }
    for (i, p) in set.orthogonal.iter().enumerate() {
        point_rows(&mut sink, "icl_orthogonal", i, p);
    }
    let c = icl_coefficients(&model, cfg.lambda);
    let (exact, asym) = predicted_rate_icl(&model, cfg.lambda);
    sink.push(0, "icl_alpha_star", alpha_star(&c), None);
    sink.push(0, "icl_predicted_rate", exact, None);
    sink.push(0, "icl_predicted_rate_small_xi", asym, None);
    sink.push(0, "icl_off_axis_points", if set.off_axis.is_some() { 1.0 } else { 0.0 }, None);
    if !cfg.l_list.is_empty() {
        let radius = 2.0 / (cfg.lambda * cov.eigenvalues()[cfg.d - 1]).sqrt();
        let report = verify_finite_prompt_landscape(&cov, cfg.lambda, &cfg.l_list, radius, cfg.samples, RngStream::new(cfg.master_seed, MC_STREAM))
            .map_err(lib)?;
        for p in &report.points {
            let step = p.prompt_length as u64;
            let tag = p.eigenindex.map_or("origin".to_string(), |j| format!("u{j}"));
            sink.push(step, format!("finite_{tag}_displacement"), p.displacement, None);
            sink.push(step, format!("finite_{tag}_grad_norm"), p.grad_norm, None);
            sink.push(step, format!("finite_{tag}_agrees"), if p.classification_agrees() { 1.0 } else { 0.0 }, None);
        }
    }
    Ok(sink.rows)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes rows as CSV with 17 significant digits.
pub fn write_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| CliError::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        let stderr = r.stderr.map(fmt_f).unwrap_or_default();
        w.write_record([r.experiment, &r.run.to_string(), &r.step.to_string(), &r.metric, &fmt_f(r.value), &stderr, &r.seed.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[ResultRow]) -> Result<String, CliError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV output is ASCII"))
}

/// A JSON schema for the config file.
pub fn config_schema() -> serde_json::Value {
    let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
    let pos_int = json!({"type": "integer", "minimum": 1});
    let pos_num = json!({"type": "number", "exclusiveMinimum": 0});
    let lengths = json!({"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1});
    let fields: serde_json::Map<String, serde_json::Value> = Experiment::ALL
        .iter()
        .map(|e| (e.name().to_string(), json!(e.fields())))
        .collect();
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "attn-pca experiment config",
        "type": "object",
        "additionalProperties": false,
        "required": ["experiment"],
        "properties": {
            "experiment": {"enum": names},
            "d": pos_int, "iters": pos_int, "batch": pos_int, "prompt_length": pos_int, "runs": pos_int,
            "n": pos_int, "samples": pos_int, "record_every": pos_int,
            "lambda": pos_num, "step_size": pos_num, "xi2": pos_num, "theta": pos_num, "horizon": pos_num, "dt": pos_num,
            "l_list": lengths, "L_list": lengths, "d_list": lengths,
            "orders": {"type": "array", "items": {"enum": [0, 1, 2]}, "minItems": 1},
            "operator": {"enum": ["softmax", "linear"]},
            "master_seed": {"type": "integer", "minimum": 0},
            "output_path": {"type": "string", "description": "output directory; --out overrides"}
        },
        "x-fields-per-experiment": fields,
    })
}

#[derive(Debug, Parser)]
#[command(name = "attn-pca", version, about = "Rank-one attention PCA experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write `<experiment>.csv` and `<experiment>.manifest.json`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_path`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Wall-time budget for sweeps; remaining sweep values are skipped.
        #[arg(long)]
        budget_seconds: Option<f64>,
    },
    /// Parse and validate a config, printing the resolved values.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the config JSON schema.
    Schema,
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var("ATTN_PCA_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::Config(format!("ATTN_PCA_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn read_config(path: &Path) -> Result<ResolvedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    load_config(&text, &path.display().to_string(), seed_from_env()?)
}

/// Runs `cfg` and writes its CSV and manifest into `dir`; returns the CSV path.
pub fn run_to_dir(cfg: &ResolvedConfig, dir: &Path, workers: Option<usize>, budget_seconds: Option<f64>) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let out = pool.install(|| run_experiment(cfg, budget_seconds))?;
    std::fs::create_dir_all(dir)?;
    let name = cfg.experiment.name();
    let csv_path = dir.join(format!("{name}.csv"));
    write_csv(&out.rows, std::fs::File::create(&csv_path)?)?;
    let manifest = json!({
        "library": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "workers": pool.current_num_threads(),
        "budget_seconds": budget_seconds,
        "skipped_sweep_values": out.skipped,
        "warnings": out.warnings,
        "rows": out.rows.len(),
        "csv": csv_path.file_name().map(|s| s.to_string_lossy().to_string()),
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    let mut f = std::fs::File::create(dir.join(format!("{name}.manifest.json")))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| CliError::Io(e.into()))?;
    writeln!(f)?;
    Ok(csv_path)
}

/// Entry point behind `main`; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&config_schema()).unwrap());
            Ok(())
        }
        Command::Validate { config } => read_config(&config).map(|cfg| println!("{}", serde_json::to_string_pretty(&cfg).unwrap())),
        Command::Run { config, out, workers, budget_seconds } => read_config(&config).and_then(|cfg| {
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_path));
            run_to_dir(&cfg, &dir, workers, budget_seconds).map(|p| println!("{}", p.display()))
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
