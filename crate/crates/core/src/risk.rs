//! Reconstruction risks at query index 1.
//!
//! Closed forms (softmax and linear, infinite and finite prompt) come with
//! analytic gradients and Hessians. Monte Carlo estimators report the sample
//! standard error, and the finite-prompt softmax estimator carries the exact
//! gradient of its own sampled objective: for a fixed stream the sampled risk
//! is a deterministic smooth function of `mu`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{dot, AttnParam};
use crate::error::{check_dim, Error, Result};
use crate::mc::{reduce_samples, Accumulator, CHUNK};
use crate::spectra::{sample_factor_into, CovarianceModel, Prompt, RngStream};

/// `a = mu^T Sigma mu` and `b = mu^T Sigma^2 mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticForms {
    pub a: f64,
    pub b: f64,
}

impl QuadraticForms {
    pub fn of(mu: &DVector<f64>, cov: &CovarianceModel) -> Result<Self> {
        Ok(Forms::new(mu, cov)?.quadratic())
    }
}

/// Value plus optional derivatives and Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEval {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
    pub mc_std_error: Option<f64>,
}

impl RiskEval {
    fn exact(value: f64, gradient: DVector<f64>, hessian: DMatrix<f64>) -> Self {
        Self { value, gradient: Some(gradient), hessian: Some(hessian), mc_std_error: None }
    }

    fn sampled(acc: &Accumulator, with_gradient: bool) -> Self {
        Self {
            value: acc.mean(),
            gradient: with_gradient.then(|| DVector::from_vec(acc.vec_mean())),
            hessian: None,
            mc_std_error: Some(acc.std_error()),
        }
    }

    /// The gradient, which every closed form and the sampled softmax risk provide.
    pub fn grad(&self) -> &DVector<f64> {
        self.gradient.as_ref().expect("risk evaluation carries no gradient")
    }

    pub fn hess(&self) -> &DMatrix<f64> {
        self.hessian.as_ref().expect("risk evaluation carries no Hessian")
    }
}

struct Forms {
    s_mu: DVector<f64>,
    s2_mu: DVector<f64>,
    a: f64,
    b: f64,
    tr: f64,
}

impl Forms {
    fn new(mu: &DVector<f64>, cov: &CovarianceModel) -> Result<Self> {
        check_dim(cov.dim(), mu.len())?;
        let s_mu = cov.apply(mu);
        let s2_mu = cov.apply(&s_mu);
        let a = mu.dot(&s_mu);
        let b = s_mu.dot(&s_mu);
        Ok(Self { s_mu, s2_mu, a, b, tr: cov.trace() })
    }

    fn quadratic(&self) -> QuadraticForms {
        QuadraticForms { a: self.a, b: self.b }
    }
}

fn sym_outer(x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    x * y.transpose() + y * x.transpose()
}

/// `tr(Sigma) - 2 lambda b + lambda^2 a b`.
pub fn risk_soft_inf(param: &AttnParam, cov: &CovarianceModel) -> Result<RiskEval> {
    let f = Forms::new(&param.mu, cov)?;
    let l = param.lambda;
    let value = f.tr - 2.0 * l * f.b + l * l * f.a * f.b;
    let gradient = &f.s2_mu * (-4.0 * l + 2.0 * l * l * f.a) + &f.s_mu * (2.0 * l * l * f.b);
    let s = cov.matrix();
    let s2 = s * s;
    let hessian = &s2 * (-4.0 * l + 2.0 * l * l * f.a)
        + s * (2.0 * l * l * f.b)
        + sym_outer(&f.s_mu, &f.s2_mu) * (4.0 * l * l);
    Ok(RiskEval::exact(value, gradient, hessian))
}

/// The coefficients `alpha(mu)`, `beta(mu)` with `grad R_lin,L = alpha Sigma mu + beta Sigma^2 mu`.
pub fn lin_alpha_beta(param: &AttnParam, cov: &CovarianceModel, len: usize) -> Result<(f64, f64)> {
    let f = Forms::new(&param.mu, cov)?;
    Ok(lin_coeffs(&f, param.lambda, len as f64))
}

fn lin_coeffs(f: &Forms, l: f64, len: f64) -> (f64, f64) {
    let c = l * l / (len * len) * (len + 2.0);
    let alpha = -4.0 * l / len * f.tr + 4.0 * c * f.tr * f.a + 2.0 * c * (len + 3.0) * f.b;
    let beta = -4.0 * l / len * (len + 1.0) + 2.0 * c * (len + 3.0) * f.a;
    (alpha, beta)
}

/// Closed-form risk of linear attention on prompts of length `len`.
pub fn risk_lin_finite(param: &AttnParam, cov: &CovarianceModel, len: usize) -> Result<RiskEval> {
    if len == 0 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    let f = Forms::new(&param.mu, cov)?;
    let l = param.lambda;
    let n = len as f64;
    let c = l * l / (n * n) * (n + 2.0);
    let value = f.tr - 2.0 * l / n * f.tr * f.a - 2.0 * l * (n + 1.0) / n * f.b
        + c * f.tr * f.a * f.a
        + c * (n + 3.0) * f.a * f.b;
    let (alpha, beta) = lin_coeffs(&f, l, n);
    let gradient = &f.s_mu * alpha + &f.s2_mu * beta;
    let s = cov.matrix();
    let hessian = s * alpha
        + (s * s) * beta
        + &f.s_mu * f.s_mu.transpose() * (8.0 * c * f.tr)
        + sym_outer(&f.s_mu, &f.s2_mu) * (4.0 * c * (n + 3.0));
    Ok(RiskEval::exact(value, gradient, hessian))
}

/// How a worker draws tokens.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Sampler<'a> {
    /// Independent coordinates with these standard deviations; used in the
    /// eigenbasis of a fixed covariance.
    Diagonal(&'a [f64]),
    /// `F z` for a `d x cols` column-major factor `F`.
    Dense { factor: &'a [f64], cols: usize },
}

/// Scratch buffers for the per-prompt kernels. Tokens are stored by
/// coordinate: `ys[i * len + k]` is coordinate `i` of token `k`.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    pub d: usize,
    pub len: usize,
    pub ys: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    w: Vec<f64>,
    c: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    v: Vec<f64>,
}

impl Workspace {
    pub fn new(d: usize, len: usize) -> Self {
        Self {
            d,
            len,
            ys: vec![0.0; d * len],
            z: Vec::new(),
            p: vec![0.0; len],
            w: vec![0.0; len],
            c: vec![0.0; len],
            s: vec![0.0; d],
            r: vec![0.0; d],
            v: vec![0.0; d],
        }
    }

    /// Draws `len` fresh tokens. Token `k` consumes the `k`-th block of
    /// normals, so shorter prompts are prefixes of longer ones.
    pub fn sample(&mut self, sampler: Sampler<'_>, rng: &mut ChaCha8Rng) {
        let (d, len) = (self.d, self.len);
        match sampler {
            Sampler::Diagonal(sd) => {
                for k in 0..len {
                    for (i, s) in sd.iter().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        self.ys[i * len + k] = s * z;
                    }
                }
            }
            Sampler::Dense { factor, cols } => {
                self.z.resize(cols, 0.0);
                for k in 0..len {
                    for z in self.z.iter_mut() {
                        *z = rng.sample(StandardNormal);
                    }
                    for i in 0..d {
                        let mut x = 0.0;
                        for (j, z) in self.z.iter().enumerate() {
                            x += factor[j * d + i] * z;
                        }
                        self.ys[i * len + k] = x;
                    }
                }
            }
        }
    }

    /// Loads a row-major token array.
    pub fn load(&mut self, tokens: &[f64]) {
        let (d, len) = (self.d, self.len);
        for k in 0..len {
            for i in 0..d {
                self.ys[i * len + k] = tokens[k * d + i];
            }
        }
    }

    /// `p_k = <X_k, mu>` for all tokens.
    fn project(&mut self, mu: &[f64]) {
        let len = self.len;
        self.p.fill(0.0);
        for (i, m) in mu.iter().enumerate() {
            let col = &self.ys[i * len..(i + 1) * len];
            for (pk, y) in self.p.iter_mut().zip(col) {
                *pk += m * y;
            }
        }
    }

    /// `c_k = <X_k, r>` for all tokens.
    fn project_residual(&mut self) {
        let len = self.len;
        self.c.fill(0.0);
        for (i, r) in self.r.iter().enumerate() {
            let col = &self.ys[i * len..(i + 1) * len];
            for (ck, y) in self.c.iter_mut().zip(col) {
                *ck += r * y;
            }
        }
    }
}

/// `||X_1 - T_L^soft(X)_1||^2` for the tokens in `ws`; when `grad` is given
/// the exact gradient in `mu` is added into it.
pub(crate) fn soft_loss_grad(ws: &mut Workspace, mu: &[f64], lambda: f64, grad: Option<&mut [f64]>) -> f64 {
    let (d, len) = (ws.d, ws.len);
    ws.project(mu);
    let q = ws.p[0];
    let scale = lambda * q;
    let max = ws.p.iter().fold(f64::NEG_INFINITY, |m, &pk| m.max(scale * pk));
    let mut total = 0.0;
    for (wk, &pk) in ws.w.iter_mut().zip(&ws.p) {
        *wk = (scale * pk - max).exp();
        total += *wk;
    }
    let inv = 1.0 / total;
    for wk in ws.w.iter_mut() {
        *wk *= inv;
    }
    let mut loss = 0.0;
    for i in 0..d {
        let col = &ws.ys[i * len..(i + 1) * len];
        let si = dot(&ws.w, col);
        ws.s[i] = si;
        ws.r[i] = col[0] - si;
        loss += ws.r[i] * ws.r[i];
    }
    if let Some(grad) = grad {
        ws.project_residual();
        let (mut cbar, mut pbar, mut wcp) = (0.0, 0.0, 0.0);
        for k in 0..len {
            let wc = ws.w[k] * ws.c[k];
            ws.c[k] = wc;
            cbar += wc;
            pbar += ws.w[k] * ws.p[k];
            wcp += wc * ws.p[k];
        }
        for i in 0..d {
            ws.v[i] = dot(&ws.c, &ws.ys[i * len..(i + 1) * len]);
        }
        let coef_x1 = wcp - cbar * pbar;
        let g = -2.0 * lambda;
        for i in 0..d {
            let x1 = ws.ys[i * len];
            grad[i] += g * (coef_x1 * x1 + q * (ws.v[i] - cbar * ws.s[i]));
        }
    }
    loss
}

/// `||X_1 - T_L^lin(X)_1||^2`, with optional gradient accumulation.
pub(crate) fn lin_loss_grad(ws: &mut Workspace, mu: &[f64], lambda: f64, grad: Option<&mut [f64]>) -> f64 {
    let (d, len) = (ws.d, ws.len);
    ws.project(mu);
    let q = ws.p[0];
    let scale = lambda / len as f64;
    let mut loss = 0.0;
    for i in 0..d {
        let col = &ws.ys[i * len..(i + 1) * len];
        let si = dot(&ws.p, col);
        ws.s[i] = si;
        ws.r[i] = col[0] - scale * q * si;
        loss += ws.r[i] * ws.r[i];
    }
    if let Some(grad) = grad {
        ws.project_residual();
        for i in 0..d {
            ws.v[i] = dot(&ws.c, &ws.ys[i * len..(i + 1) * len]);
        }
        let rs = dot(&ws.r, &ws.s);
        for i in 0..d {
            grad[i] += -2.0 * scale * (rs * ws.ys[i * len] + q * ws.v[i]);
        }
    }
    loss
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Operator {
    Softmax,
    Linear,
}

pub(crate) fn eval_operator(op: Operator, ws: &mut Workspace, mu: &[f64], lambda: f64, grad: Option<&mut [f64]>) -> f64 {
    match op {
        Operator::Softmax => soft_loss_grad(ws, mu, lambda, grad),
        Operator::Linear => lin_loss_grad(ws, mu, lambda, grad),
    }
}

/// Mean loss (and gradient sum) over `batch` prompts; prompt `i` is drawn
/// from `stream.substream(i)`, so a longer prompt extends a shorter one.
///
/// Work happens in the eigenbasis of `Sigma`: tokens `y = diag(sqrt(sigma)) z`
/// stand for `X = U y`, the parameter is `U^T mu` and the gradient is rotated
/// back. Losses are rotation invariant, so this equals sampling `X` directly.
pub(crate) fn prompt_batch(
    op: Operator,
    cov: &CovarianceModel,
    len: usize,
    batch: usize,
    stream: RngStream,
    param: &AttnParam,
    with_gradient: bool,
) -> Accumulator {
    let d = cov.dim();
    let u = cov.eigenvectors();
    let nu = u.tr_mul(&param.mu);
    let sd: Vec<f64> = cov.eigenvalues().iter().map(|s| s.sqrt()).collect();
    let (nu, sd) = (nu.as_slice(), sd.as_slice());
    let mut acc = reduce_samples(batch, if with_gradient { d } else { 0 }, |range, acc| {
        let mut ws = Workspace::new(d, len);
        for i in range {
            let mut rng = stream.substream(i as u64).rng();
            ws.sample(Sampler::Diagonal(sd), &mut rng);
            let grad = with_gradient.then_some(acc.vec.as_mut_slice());
            let loss = eval_operator(op, &mut ws, nu, param.lambda, grad);
            acc.push(loss);
        }
    });
    if with_gradient {
        acc.vec = (u * DVector::from_column_slice(&acc.vec)).as_slice().to_vec();
    }
    acc
}

fn check_mc(param: &AttnParam, cov: &CovarianceModel, len: usize, count: usize) -> Result<()> {
    check_dim(cov.dim(), param.dim())?;
    if count < 2 {
        return Err(Error::InvalidArgument(format!("Monte Carlo needs at least 2 samples, got {count}")));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of the finite-prompt softmax risk over `batches`
/// prompts, with the exact gradient of the sampled objective.
pub fn risk_soft_finite_mc(
    param: &AttnParam,
    cov: &CovarianceModel,
    len: usize,
    batches: usize,
    rng: RngStream,
) -> Result<RiskEval> {
    check_mc(param, cov, len, batches)?;
    let acc = prompt_batch(Operator::Softmax, cov, len, batches, rng, param, true);
    Ok(RiskEval::sampled(&acc, true))
}

/// Monte Carlo estimate of the finite-prompt linear risk; the oracle for
/// [`risk_lin_finite`].
pub fn risk_lin_finite_mc(
    param: &AttnParam,
    cov: &CovarianceModel,
    len: usize,
    batches: usize,
    rng: RngStream,
) -> Result<RiskEval> {
    check_mc(param, cov, len, batches)?;
    let acc = prompt_batch(Operator::Linear, cov, len, batches, rng, param, true);
    Ok(RiskEval::sampled(&acc, true))
}

/// Empirical softmax risk and its exact gradient on an explicit set of prompts.
pub fn empirical_soft_risk(prompts: &[Prompt], param: &AttnParam) -> Result<RiskEval> {
    if prompts.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 prompts".into()));
    }
    let d = param.dim();
    let mut acc = Accumulator::new(d);
    for p in prompts {
        check_dim(d, p.dim())?;
        let mut ws = Workspace::new(d, p.len());
        ws.load(p.flat());
        let loss = soft_loss_grad(&mut ws, param.mu.as_slice(), param.lambda, Some(&mut acc.vec));
        acc.push(loss);
    }
    Ok(RiskEval::sampled(&acc, true))
}

/// Monte Carlo estimate of `E ||X - lambda Sigma mu mu^T X||^2`.
pub fn risk_soft_inf_mc(param: &AttnParam, cov: &CovarianceModel, samples: usize, rng: RngStream) -> Result<RiskEval> {
    check_mc(param, cov, 1, samples)?;
    let d = cov.dim();
    let t = cov.apply(&param.mu) * param.lambda;
    let (t, mu, factor) = (t.as_slice(), param.mu.as_slice(), cov.factor().as_slice());
    let acc = reduce_samples(samples, 0, |range, acc| {
        let mut chunk_rng = rng.substream((range.start / CHUNK) as u64).rng();
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        for _ in range {
            sample_factor_into(factor, d, &mut chunk_rng, &mut z, &mut x);
            let c = dot(&x, mu);
            let err: f64 = x.iter().zip(t).map(|(xi, ti)| (xi - c * ti).powi(2)).sum();
            acc.push(err);
        }
    });
    Ok(RiskEval::sampled(&acc, false))
}
