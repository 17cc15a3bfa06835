//! Gradient descent, stochastic gradient descent on sampled prompts,
//! projected descent for sequential components, the Oja-flow equivalence
//! check, and exponential-rate fitting.
//!
//! Deterministic traces record `mu_0 .. mu_n` (values, gradient norms and
//! alignments have `n + 1` entries). Stochastic traces record the batch loss
//! and gradient norm of each of the `n` steps and `n + 1` alignments.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::AttnParam;
use crate::error::{check_dim, Error, Result};
use crate::landscape::ascending_spectrum;
use crate::risk::{prompt_batch, risk_lin_finite, risk_soft_inf, Operator};
use crate::spectra::{CovarianceModel, RngStream};

/// A smooth objective with closed-form gradient and optional Hessian.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value_grad(&self, mu: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn hessian(&self, _mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// The infinite-prompt softmax risk.
#[derive(Debug, Clone, Copy)]
pub struct SoftInfObjective<'a> {
    pub cov: &'a CovarianceModel,
    pub lambda: f64,
}

impl Objective for SoftInfObjective<'_> {
    fn dim(&self) -> usize {
        self.cov.dim()
    }

    fn value_grad(&self, mu: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let r = risk_soft_inf(&AttnParam { mu: mu.clone(), lambda: self.lambda }, self.cov)?;
        Ok((r.value, r.grad().clone()))
    }

    fn hessian(&self, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        risk_soft_inf(&AttnParam { mu: mu.clone(), lambda: self.lambda }, self.cov)
            .ok()
            .and_then(|r| r.hessian)
    }
}

/// The closed-form finite-prompt linear risk.
#[derive(Debug, Clone, Copy)]
pub struct LinFiniteObjective<'a> {
    pub cov: &'a CovarianceModel,
    pub lambda: f64,
    pub len: usize,
}

impl Objective for LinFiniteObjective<'_> {
    fn dim(&self) -> usize {
        self.cov.dim()
    }

    fn value_grad(&self, mu: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let r = risk_lin_finite(&AttnParam { mu: mu.clone(), lambda: self.lambda }, self.cov, self.len)?;
        Ok((r.value, r.grad().clone()))
    }

    fn hessian(&self, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        risk_lin_finite(&AttnParam { mu: mu.clone(), lambda: self.lambda }, self.cov, self.len)
            .ok()
            .and_then(|r| r.hessian)
    }
}

/// `0.5 * curvature * ||mu - center||^2`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub center: DVector<f64>,
    pub curvature: f64,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value_grad(&self, mu: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let diff = mu - &self.center;
        Ok((0.5 * self.curvature * diff.norm_squared(), diff * self.curvature))
    }

    fn hessian(&self, _mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d = self.dim();
        Some(DMatrix::identity(d, d) * self.curvature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub mode: Mode,
    pub batch_size: usize,
    pub prompt_length: usize,
    pub stop_grad_norm: f64,
    pub rng: RngStream,
    /// Every `store_stride`-th iterate is kept (the last one always is).
    pub store_stride: usize,
}

impl OptimizerConfig {
    pub fn deterministic(step_size: f64, max_iters: usize) -> Self {
        Self {
            step_size,
            max_iters,
            mode: Mode::Deterministic,
            batch_size: 0,
            prompt_length: 0,
            stop_grad_norm: 1e-12,
            rng: RngStream::new(0, 0),
            store_stride: 10,
        }
    }

    pub fn stochastic(step_size: f64, max_iters: usize, batch_size: usize, prompt_length: usize, rng: RngStream) -> Self {
        Self {
            step_size,
            max_iters,
            mode: Mode::Stochastic,
            batch_size,
            prompt_length,
            stop_grad_norm: 0.0,
            rng,
            store_stride: 10,
        }
    }

    pub fn with_stop_grad_norm(mut self, tol: f64) -> Self {
        self.stop_grad_norm = tol;
        self
    }

    pub fn with_rng(mut self, rng: RngStream) -> Self {
        self.rng = rng;
        self
    }

    /// Keeps every iterate.
    pub fn full_storage(mut self) -> Self {
        self.store_stride = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if self.store_stride == 0 {
            return Err(Error::InvalidArgument("store_stride must be >= 1".into()));
        }
        if self.mode == Mode::Stochastic && (self.batch_size == 0 || self.prompt_length == 0) {
            return Err(Error::InvalidArgument("stochastic mode needs batch_size >= 1 and prompt_length >= 1".into()));
        }
        Ok(())
    }

    fn require(&self, mode: Mode) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            return Err(Error::InvalidArgument(format!("expected a {mode:?} config, got {:?}", self.mode)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Converged,
    SaddleTerminated,
    MaxIters,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptTrace {
    pub mode: Mode,
    pub step_size: f64,
    /// `(iteration, mu_iteration)` pairs, strided.
    pub iterates: Vec<(usize, DVector<f64>)>,
    pub risk_values: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub alignment: Vec<f64>,
    pub wall_time_per_iter: f64,
    pub status: TraceStatus,
    pub iterations: usize,
    pub final_mu: DVector<f64>,
}

impl OptTrace {
    pub fn final_alignment(&self) -> f64 {
        *self.alignment.last().unwrap()
    }
}

/// `|<mu / ||mu||, target>|` for unit `target`; zero at the origin.
pub fn alignment(mu: &DVector<f64>, target: &DVector<f64>) -> f64 {
    let n = mu.norm();
    if n == 0.0 {
        0.0
    } else {
        (mu.dot(target) / n).abs().min(1.0)
    }
}

fn unit(target: &DVector<f64>) -> Result<DVector<f64>> {
    let n = target.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument("alignment target must be a nonzero vector".into()));
    }
    Ok(target / n)
}

/// Uniform draw on the unit sphere.
pub fn random_unit_vector(d: usize, rng: RngStream) -> DVector<f64> {
    let mut r = rng.rng();
    loop {
        let v = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Orthogonal projector onto the complement of an orthonormal basis.
#[derive(Debug, Clone)]
struct Deflation {
    basis: Vec<DVector<f64>>,
}

impl Deflation {
    fn new(basis: &[DVector<f64>], d: usize) -> Result<Self> {
        for b in basis {
            check_dim(d, b.len())?;
        }
        let mut worst = 0.0f64;
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
        if worst > 1e-10 {
            return Err(Error::NotOrthonormal(worst));
        }
        Ok(Self { basis: basis.to_vec() })
    }

    fn apply(&self, v: &mut DVector<f64>) {
        for b in &self.basis {
            let c = b.dot(v);
            v.axpy(-c, b, 1.0);
        }
    }

    fn matrix(&self, d: usize) -> DMatrix<f64> {
        let mut p = DMatrix::identity(d, d);
        for b in &self.basis {
            p -= b * b.transpose();
        }
        p
    }
}

struct Recorder {
    trace: OptTrace,
    target: DVector<f64>,
    stride: usize,
}

impl Recorder {
    fn new(config: &OptimizerConfig, mu0: &DVector<f64>, target: DVector<f64>) -> Self {
        let trace = OptTrace {
            mode: config.mode,
            step_size: config.step_size,
            iterates: vec![(0, mu0.clone())],
            risk_values: Vec::new(),
            grad_norms: Vec::new(),
            alignment: vec![alignment(mu0, &target)],
            wall_time_per_iter: 0.0,
            status: TraceStatus::MaxIters,
            iterations: 0,
            final_mu: mu0.clone(),
        };
        Self { trace, target, stride: config.store_stride }
    }

    fn record_step(&mut self, iter: usize, mu: &DVector<f64>) {
        self.trace.alignment.push(alignment(mu, &self.target));
        if iter % self.stride == 0 {
            self.trace.iterates.push((iter, mu.clone()));
        }
    }

    fn finish(mut self, mu: DVector<f64>, iterations: usize, status: TraceStatus, start: Instant) -> OptTrace {
        if self.trace.iterates.last().map(|(k, _)| *k) != Some(iterations) {
            self.trace.iterates.push((iterations, mu.clone()));
        }
        self.trace.status = status;
        self.trace.iterations = iterations;
        self.trace.final_mu = mu;
        self.trace.wall_time_per_iter = start.elapsed().as_secs_f64() / iterations.max(1) as f64;
        self.trace
    }
}

fn check_finite(mu: &DVector<f64>, value: f64, iter: usize) -> Result<()> {
    if value.is_finite() && mu.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { iter })
    }
}

/// Whether a stationary point is a saddle or maximum rather than a minimum.
fn has_negative_curvature(h: &DMatrix<f64>) -> bool {
    match ascending_spectrum(h) {
        Ok(s) => {
            let scale = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            s[0] < -1e-8 * scale
        }
        Err(_) => false,
    }
}

fn descend(
    objective: &dyn Objective,
    mu0: &DVector<f64>,
    deflation: Option<&Deflation>,
    config: &OptimizerConfig,
    target: &DVector<f64>,
) -> Result<OptTrace> {
    config.require(Mode::Deterministic)?;
    let d = objective.dim();
    check_dim(d, mu0.len())?;
    let start = Instant::now();
    let mut mu = mu0.clone();
    if let Some(p) = deflation {
        p.apply(&mut mu);
    }
    let mut rec = Recorder::new(config, &mu, unit(target)?);
    let project = |mut g: DVector<f64>| {
        if let Some(p) = deflation {
            p.apply(&mut g);
        }
        g
    };
    let (mut value, g) = objective.value_grad(&mu)?;
    let mut grad = project(g);
    check_finite(&mu, value, 0)?;
    for iter in 0..config.max_iters {
        rec.trace.risk_values.push(value);
        rec.trace.grad_norms.push(grad.norm());
        if grad.norm() < config.stop_grad_norm {
            let saddle = objective.hessian(&mu).is_some_and(|h| {
                let h = match deflation {
                    Some(p) => {
                        let pm = p.matrix(d);
                        &pm * h * &pm
                    }
                    None => h,
                };
                has_negative_curvature(&h)
            });
            let status = if saddle { TraceStatus::SaddleTerminated } else { TraceStatus::Converged };
            return Ok(rec.finish(mu, iter, status, start));
        }
        mu.axpy(-config.step_size, &grad, 1.0);
        if let Some(p) = deflation {
            p.apply(&mut mu);
        }
        let (new_value, g) = objective.value_grad(&mu)?;
        check_finite(&mu, new_value, iter + 1)?;
        if new_value > value + 1e-12 * (1.0 + value.abs()) {
            return Err(Error::StepSizeTooLarge(format!(
                "risk increased from {value:.17e} to {new_value:.17e} at iteration {} with step {}",
                iter + 1,
                config.step_size
            )));
        }
        value = new_value;
        grad = project(g);
        rec.record_step(iter + 1, &mu);
    }
    rec.trace.risk_values.push(value);
    rec.trace.grad_norms.push(grad.norm());
    let n = config.max_iters;
    Ok(rec.finish(mu, n, TraceStatus::MaxIters, start))
}

/// `mu_{k+1} = mu_k - gamma grad(mu_k)` with alignment tracked against `target`.
pub fn gradient_descent(
    objective: &dyn Objective,
    mu0: &DVector<f64>,
    config: &OptimizerConfig,
    target: &DVector<f64>,
) -> Result<OptTrace> {
    descend(objective, mu0, None, config, target)
}

/// `mu_{k+1} = P(mu_k - gamma grad(mu_k))`, `P` removing the span of `basis`.
pub fn projected_descent(
    objective: &dyn Objective,
    mu0: &DVector<f64>,
    basis: &[DVector<f64>],
    config: &OptimizerConfig,
    target: &DVector<f64>,
) -> Result<OptTrace> {
    let deflation = Deflation::new(basis, objective.dim())?;
    descend(objective, mu0, Some(&deflation), config, target)
}

pub(crate) fn stochastic_descent(
    mu0: &DVector<f64>,
    config: &OptimizerConfig,
    target: &DVector<f64>,
    mut batch_grad: impl FnMut(&DVector<f64>, RngStream) -> (f64, DVector<f64>),
) -> Result<OptTrace> {
    config.require(Mode::Stochastic)?;
    let start = Instant::now();
    let mut mu = mu0.clone();
    let mut rec = Recorder::new(config, &mu, unit(target)?);
    for iter in 0..config.max_iters {
        let (loss, grad) = batch_grad(&mu, config.rng.substream(iter as u64));
        rec.trace.risk_values.push(loss);
        rec.trace.grad_norms.push(grad.norm());
        mu.axpy(-config.step_size, &grad, 1.0);
        check_finite(&mu, loss, iter + 1)?;
        rec.record_step(iter + 1, &mu);
    }
    Ok(rec.finish(mu, config.max_iters, TraceStatus::MaxIters, start))
}

fn sgd_with(op: Operator, cov: &CovarianceModel, template: &AttnParam, config: &OptimizerConfig, target: &DVector<f64>) -> Result<OptTrace> {
    check_dim(cov.dim(), template.dim())?;
    stochastic_descent(&template.mu, config, target, |mu, stream| {
        let p = AttnParam { mu: mu.clone(), lambda: template.lambda };
        let acc = prompt_batch(op, cov, config.prompt_length, config.batch_size, stream, &p, true);
        (acc.mean(), DVector::from_vec(acc.vec_mean()))
    })
}

/// SGD on the finite-prompt softmax risk from `template.mu`. Step `k` draws
/// `batch_size` fresh prompts from `config.rng.substream(k)`.
pub fn sgd_finite_prompt(cov: &CovarianceModel, template: &AttnParam, config: &OptimizerConfig, target: &DVector<f64>) -> Result<OptTrace> {
    sgd_with(Operator::Softmax, cov, template, config, target)
}

/// SGD on the finite-prompt linear-attention risk.
pub fn sgd_finite_prompt_linear(cov: &CovarianceModel, template: &AttnParam, config: &OptimizerConfig, target: &DVector<f64>) -> Result<OptTrace> {
    sgd_with(Operator::Linear, cov, template, config, target)
}

/// Flips `v` so that its entry of largest magnitude is positive.
pub fn canonical_sign(v: &DVector<f64>) -> DVector<f64> {
    if v[v.iamax()] < 0.0 {
        -v
    } else {
        v.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PcaComponent {
    pub direction: DVector<f64>,
    pub eigenvalue: f64,
    pub status: TraceStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequentialPca {
    pub components: Vec<PcaComponent>,
    /// Set when a stage failed to converge; `components` then holds the stages before it.
    pub failure: Option<String>,
}

/// Recovers `k` eigenpairs by projected descent on the infinite-prompt softmax
/// risk with a growing deflation basis. Stage `j` starts from a uniform unit
/// vector drawn from `config.rng.substream(j)`.
pub fn sequential_pca(cov: &CovarianceModel, lambda: f64, k: usize, config: &OptimizerConfig) -> Result<SequentialPca> {
    let d = cov.dim();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("k must lie in 1..={d}, got {k}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be > 0".into()));
    }
    let objective = SoftInfObjective { cov, lambda };
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut components = Vec::new();
    for stage in 0..k {
        let mu0 = random_unit_vector(d, config.rng.substream(stage as u64));
        let target = cov.eigenvector(stage);
        let trace = match projected_descent(&objective, &mu0, &basis, config, &target) {
            Ok(t) => t,
            Err(e) => return Ok(SequentialPca { components, failure: Some(format!("stage {stage}: {e}")) }),
        };
        if trace.status != TraceStatus::Converged {
            return Ok(SequentialPca {
                components,
                failure: Some(format!("stage {stage}: {:?} after {} iterations", trace.status, trace.iterations)),
            });
        }
        let norm = trace.final_mu.norm();
        let direction = canonical_sign(&(&trace.final_mu / norm));
        basis.push(direction.clone());
        components.push(PcaComponent {
            direction,
            eigenvalue: 1.0 / (lambda * norm * norm),
            status: trace.status,
            iterations: trace.iterations,
        });
    }
    Ok(SequentialPca { components, failure: None })
}

/// `Sigma [A(w) Sigma w - B (w^T Sigma w) w]` with `A = 2 lambda (2 - lambda w^T w)`, `B = 2 lambda^2`.
pub fn oja_vector_field(cov: &CovarianceModel, lambda: f64, w: &DVector<f64>) -> DVector<f64> {
    let sw = cov.apply(w);
    let a = 2.0 * lambda * (2.0 - lambda * w.norm_squared());
    let b = 2.0 * lambda * lambda;
    cov.apply(&(&sw * a - w * (b * w.dot(&sw))))
}

#[derive(Debug, Clone, Serialize)]
pub struct OjaReport {
    pub dt: f64,
    pub steps: usize,
    /// `max_t ||Sigma^{1/2} mu(t) - w(t)||` with both flows integrated by Euler at `dt`.
    pub same_scheme_gap: f64,
    /// Same maximum with `w` replaced by an RK4 reference solution.
    pub euler_error: f64,
    /// The reference-error maximum at step `dt / 2`.
    pub euler_error_half: f64,
    /// `euler_error / euler_error_half`; close to 2 for a first-order scheme.
    pub richardson_ratio: f64,
    /// `||w-field(Sigma^{1/2} mu_star)||` at the global minimiser.
    pub stationary_residual: f64,
}

/// Integrates the `mu`-gradient flow and the Oja-type `w` flow from
/// `w_0 = Sigma^{1/2} mu_0` and compares them over `[0, horizon]`.
pub fn oja_equivalence_check(cov: &CovarianceModel, lambda: f64, mu0: &DVector<f64>, horizon: f64, dt: f64) -> Result<OjaReport> {
    check_dim(cov.dim(), mu0.len())?;
    if !(dt > 0.0 && horizon > 0.0 && lambda > 0.0) {
        return Err(Error::InvalidArgument("dt, horizon and lambda must be > 0".into()));
    }
    let steps = (horizon / dt).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidArgument("horizon shorter than one step".into()));
    }
    let root = cov.power_matrix(0.5);
    let mu_flow = |h: f64, n: usize| -> Result<Vec<DVector<f64>>> {
        let mut mu = mu0.clone();
        let mut out = Vec::with_capacity(n + 1);
        out.push(&root * &mu);
        for iter in 0..n {
            let g = risk_soft_inf(&AttnParam { mu: mu.clone(), lambda }, cov)?;
            mu.axpy(-h, g.grad(), 1.0);
            check_finite(&mu, 0.0, iter + 1)?;
            out.push(&root * &mu);
        }
        Ok(out)
    };
    let field = |w: &DVector<f64>| oja_vector_field(cov, lambda, w);
    let w0 = &root * mu0;

    let euler_mu = mu_flow(dt, steps)?;
    let mut w = w0.clone();
    let mut same_scheme_gap = (&euler_mu[0] - &w).norm();
    for tw in euler_mu.iter().skip(1) {
        let f = field(&w);
        w.axpy(dt, &f, 1.0);
        same_scheme_gap = same_scheme_gap.max((tw - &w).norm());
    }

    let half = dt / 2.0;
    let mut reference = Vec::with_capacity(2 * steps + 1);
    let mut w = w0;
    reference.push(w.clone());
    for _ in 0..2 * steps {
        let k1 = field(&w);
        let k2 = field(&(&w + &k1 * (half / 2.0)));
        let k3 = field(&(&w + &k2 * (half / 2.0)));
        let k4 = field(&(&w + &k3 * half));
        w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (half / 6.0);
        reference.push(w.clone());
    }
    let euler_error = euler_mu
        .iter()
        .enumerate()
        .map(|(k, tw)| (tw - &reference[2 * k]).norm())
        .fold(0.0, f64::max);
    let euler_error_half = mu_flow(half, 2 * steps)?
        .iter()
        .zip(&reference)
        .map(|(tw, r)| (tw - r).norm())
        .fold(0.0, f64::max);

    let (s1, u1) = cov.principal();
    let star = &root * (u1 / (lambda * s1).sqrt());
    Ok(OjaReport {
        dt,
        steps,
        same_scheme_gap,
        euler_error,
        euler_error_half,
        richardson_ratio: euler_error / euler_error_half,
        stationary_residual: field(&star).norm(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// Decay rate of `||mu(t) - target||` in flow time `t = k gamma`.
    pub rate: f64,
    /// Decay rate of the risk gap, when it stays above rounding long enough.
    pub risk_gap_rate: Option<f64>,
    pub r_squared: f64,
    /// First and last iteration of the fitted window.
    pub window: (usize, usize),
}

pub const RATE_FIT_MIN_POINTS: usize = 10;
pub const RATE_FIT_MIN_R2: f64 = 0.99;

/// Least squares on the suffix window with the largest `R^2`.
fn best_suffix_fit(t: &[f64], y: &[f64]) -> Option<(f64, f64, usize)> {
    let n = t.len();
    if n < RATE_FIT_MIN_POINTS {
        return None;
    }
    let (mut st, mut sy, mut stt, mut syy, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut best: Option<(f64, f64, usize)> = None;
    let t0 = t[n - 1];
    for i in (0..n).rev() {
        let (ti, yi) = (t[i] - t0, y[i]);
        st += ti;
        sy += yi;
        stt += ti * ti;
        syy += yi * yi;
        sty += ti * yi;
        let m = (n - i) as f64;
        if n - i < RATE_FIT_MIN_POINTS {
            continue;
        }
        let vt = stt - st * st / m;
        let vy = syy - sy * sy / m;
        let cov = sty - st * sy / m;
        if vt <= 0.0 || vy <= 0.0 {
            continue;
        }
        let r2 = cov * cov / (vt * vy);
        let slope = cov / vt;
        if best.is_none_or(|b| r2 > b.1) {
            best = Some((slope, r2, i));
        }
    }
    best
}

/// Fits `log ||mu_k - target||` against `k gamma` on a converged deterministic trace.
pub fn fit_exponential_rate(trace: &OptTrace, target: &DVector<f64>) -> Result<RateFit> {
    if trace.mode != Mode::Deterministic {
        return Err(Error::RateFit("rate fitting needs a deterministic trace".into()));
    }
    if trace.status != TraceStatus::Converged {
        return Err(Error::RateFit(format!("trace is not converged ({:?})", trace.status)));
    }
    let floor = 1e-10 * (1.0 + target.norm());
    let (mut t, mut y, mut iters) = (Vec::new(), Vec::new(), Vec::new());
    for (k, mu) in &trace.iterates {
        check_dim(target.len(), mu.len())?;
        let e = (mu - target).norm();
        if e > floor {
            t.push(*k as f64 * trace.step_size);
            y.push(e.ln());
            iters.push(*k);
        }
    }
    let (slope, r2, start) = best_suffix_fit(&t, &y)
        .ok_or_else(|| Error::RateFit(format!("only {} usable points above the floor", t.len())))?;
    if r2 <= RATE_FIT_MIN_R2 {
        return Err(Error::RateFit(format!("best window has R^2 = {r2:.6}")));
    }

    let final_risk = *trace.risk_values.last().unwrap();
    let gap_floor = 1e-10 * (1.0 + final_risk.abs());
    let (mut gt, mut gy) = (Vec::new(), Vec::new());
    for (k, r) in trace.risk_values.iter().enumerate() {
        let gap = r - final_risk;
        if gap > gap_floor {
            gt.push(k as f64 * trace.step_size);
            gy.push(gap.ln());
        }
    }
    let risk_gap_rate = best_suffix_fit(&gt, &gy).filter(|f| f.1 > RATE_FIT_MIN_R2).map(|f| -f.0);
    Ok(RateFit { rate: -slope, risk_gap_rate, r_squared: r2, window: (iters[start], *iters.last().unwrap()) })
}
