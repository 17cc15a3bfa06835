//! The spiked-Wishart in-context setting: `Sigma ~ W_d(V, n)` with
//! `V = xi2 I + theta v v^T`, closed-form infinite-prompt risk and its
//! landscape, and Monte Carlo finite-prompt risk and SGD.
//!
//! Throughout, `r^2 = ||mu||^2` and `alpha = <v, mu>`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::AttnParam;
use crate::error::{check_dim, Error, Result};
use crate::landscape::{point_from_eval, CriticalKind, CriticalPoint};
use crate::mc::{map_chunks, tree_reduce, Accumulator};
use crate::optim::{stochastic_descent, Objective, OptTrace, OptimizerConfig};
use crate::risk::{soft_loss_grad, RiskEval, Sampler, Workspace};
use crate::spectra::{CovarianceModel, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikedWishartModel {
    pub xi2: f64,
    pub theta: f64,
    pub spike: DVector<f64>,
    pub dof: usize,
}

impl SpikedWishartModel {
    pub fn new(xi2: f64, theta: f64, spike: DVector<f64>, dof: usize) -> Result<Self> {
        if !(xi2 > 0.0 && theta > 0.0 && xi2.is_finite() && theta.is_finite()) {
            return Err(Error::InvalidArgument(format!("need xi2 > 0 and theta > 0, got {xi2}, {theta}")));
        }
        if dof == 0 {
            return Err(Error::InvalidArgument("degrees of freedom must be >= 1".into()));
        }
        if spike.is_empty() || (spike.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("spike must be a unit vector, norm {}", spike.norm())));
        }
        Ok(Self { xi2, theta, spike, dof })
    }

    /// Model with spike `e_1` in dimension `d`.
    pub fn canonical(d: usize, xi2: f64, theta: f64, dof: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        let mut v = DVector::zeros(d);
        v[0] = 1.0;
        Self::new(xi2, theta, v, dof)
    }

    pub fn dim(&self) -> usize {
        self.spike.len()
    }

    pub fn scale_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) * self.xi2 + &self.spike * self.spike.transpose() * self.theta
    }

    pub fn trace_v(&self) -> f64 {
        self.dim() as f64 * self.xi2 + self.theta
    }

    /// `mu^T V mu` and `mu^T V^2 mu`.
    fn forms(&self, mu: &DVector<f64>) -> (f64, f64) {
        let r2 = mu.norm_squared();
        let a2 = self.spike.dot(mu).powi(2);
        let (x, t) = (self.xi2, self.theta);
        (x * r2 + t * a2, x * x * r2 + (2.0 * x * t + t * t) * a2)
    }

    /// Draws `x ~ N(0, V)` using `V^{1/2} = xi I + (sqrt(xi2 + theta) - xi) v v^T`.
    fn draw_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let xi = self.xi2.sqrt();
        let extra = (self.xi2 + self.theta).sqrt() - xi;
        let mut proj = 0.0;
        for (o, v) in out.iter_mut().zip(self.spike.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *o = z;
            proj += v * z;
        }
        for (o, v) in out.iter_mut().zip(self.spike.iter()) {
            *o = xi * *o + extra * proj * v;
        }
    }

    /// `sum_r x_r x_r^T` over `dof` draws, as a dense matrix.
    fn draw_matrix(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let d = self.dim();
        let mut sigma = DMatrix::zeros(d, d);
        let mut x = vec![0.0; d];
        for _ in 0..self.dof {
            self.draw_into(rng, &mut x);
            for j in 0..d {
                for i in 0..d {
                    sigma[(i, j)] += x[i] * x[j];
                }
            }
        }
        sigma
    }
}

/// A Wishart draw as a covariance model. Rank deficient when `dof < d`.
pub fn wishart_sample(model: &SpikedWishartModel, rng: RngStream) -> Result<CovarianceModel> {
    if model.dof < model.dim() {
        warn!("Wishart draw with n = {} < d = {} is singular", model.dof, model.dim());
    }
    CovarianceModel::new_semidefinite(model.draw_matrix(&mut rng.rng()))
}

/// `(E tr Sigma, E mu^T Sigma^2 mu, E (mu^T Sigma mu)(mu^T Sigma^2 mu))`.
pub fn wishart_moments(model: &SpikedWishartModel, mu: &DVector<f64>) -> Result<(f64, f64, f64)> {
    check_dim(model.dim(), mu.len())?;
    let n = model.dof as f64;
    let (p, q) = model.forms(mu);
    let t = model.trace_v();
    Ok((n * t, n * (n + 1.0) * q + n * t * p, n * (n + 2.0) * ((n + 3.0) * p * q + p * p * t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IclCoefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl IclCoefficients {
    /// `A = a1 r^2 + a2 alpha^2 - a3`.
    pub fn big_a(&self, r2: f64, alpha2: f64) -> f64 {
        self.a1 * r2 + self.a2 * alpha2 - self.a3
    }

    /// `B = b1 r^2 + b2 alpha^2 - b3`.
    pub fn big_b(&self, r2: f64, alpha2: f64) -> f64 {
        self.b1 * r2 + self.b2 * alpha2 - self.b3
    }

    /// `a1 b3 > a2 a3` and `(a1 + a2) b3 > (a2 + b2) a3`.
    pub fn conditions(&self) -> (bool, bool) {
        (
            self.a1 * self.b3 > self.a2 * self.a3,
            (self.a1 + self.a2) * self.b3 > (self.a2 + self.b2) * self.a3,
        )
    }
}

pub fn icl_coefficients(model: &SpikedWishartModel, lambda: f64) -> IclCoefficients {
    let n = model.dof as f64;
    let d = model.dim() as f64;
    let (x, t, l) = (model.xi2, model.theta, lambda);
    let c = l * l * n * (n + 2.0);
    let a2 = c * x * t * ((3.0 * n + 2.0 * d + 9.0) * x + (n + 5.0) * t);
    IclCoefficients {
        a1: 2.0 * c * x * x * ((n + d + 3.0) * x + t),
        a2,
        a3: 2.0 * l * n * x * ((n + d + 1.0) * x + t),
        b1: a2,
        b2: 2.0 * c * t * t * ((2.0 * n + d + 6.0) * x + (n + 4.0) * t),
        b3: 2.0 * l * n * t * ((2.0 * n + d + 2.0) * x + (n + 2.0) * t),
    }
}

/// Closed-form infinite-prompt ICL risk with gradient and Hessian.
pub fn risk_icl_inf(mu: &DVector<f64>, model: &SpikedWishartModel, lambda: f64) -> Result<RiskEval> {
    check_dim(model.dim(), mu.len())?;
    let n = model.dof as f64;
    let (p, q) = model.forms(mu);
    let t = model.trace_v();
    let value = n * t - 2.0 * lambda * n * ((n + 1.0) * q + t * p)
        + lambda * lambda * n * (n + 2.0) * ((n + 3.0) * p * q + p * p * t);

    let c = icl_coefficients(model, lambda);
    let v = &model.spike;
    let alpha = v.dot(mu);
    let (r2, al2) = (mu.norm_squared(), alpha * alpha);
    let big_a = c.big_a(r2, al2);
    let big_b = c.big_b(r2, al2);
    let gradient = (mu * big_a + v * (big_b * alpha)) * 2.0;
    let d = model.dim();
    let vvt = v * v.transpose();
    let hessian = DMatrix::identity(d, d) * (2.0 * big_a)
        + &vvt * (2.0 * big_b + 4.0 * al2 * c.b2)
        + mu * mu.transpose() * (4.0 * c.a1)
        + (mu * v.transpose() + v * mu.transpose()) * (4.0 * alpha * c.a2);
    Ok(RiskEval { value, gradient: Some(gradient), hessian: Some(hessian), mc_std_error: None })
}

/// `sqrt((a3 + b3) / (a1 + 2 a2 + b2))`.
pub fn alpha_star(coeffs: &IclCoefficients) -> f64 {
    ((coeffs.a3 + coeffs.b3) / (coeffs.a1 + 2.0 * coeffs.a2 + coeffs.b2)).sqrt()
}

/// `(exact, small_xi_asymptotic)` local rates at `alpha_star v`.
///
/// `exact` is the smallest Hessian eigenvalue there: the closed form
/// `2 lambda n theta xi2 [...] / [...]` (the perpendicular curvature) when it
/// does not exceed the curvature `4 (a3 + b3)` along `v`, and `4 (a3 + b3)`
/// otherwise or for `d = 1`.
pub fn predicted_rate_icl(model: &SpikedWishartModel, lambda: f64) -> (f64, f64) {
    let n = model.dof as f64;
    let d = model.dim() as f64;
    let (x, t) = (model.xi2, model.theta);
    let perp = 2.0 * lambda * n * t * x * (t * (n * n + 5.0 * n + 2.0) + x * (n * n + d * n + 4.0 * n - d + 3.0))
        / ((n + 4.0) * t + (d + n + 3.0) * x);
    let c = icl_coefficients(model, lambda);
    let along = 4.0 * (c.a3 + c.b3);
    let exact = if model.dim() == 1 { along } else { perp.min(along) };
    let asymptotic = 2.0 * lambda * n * (n * n + 5.0 * n + 2.0) * t * x / (n + 4.0);
    (exact, asymptotic)
}

/// Solution `(r^2, alpha^2)` of `A = B = 0` when it is an admissible
/// off-axis point (`r^2 > alpha^2 > 0`).
pub fn off_axis_solution(c: &IclCoefficients) -> Option<(f64, f64)> {
    let det = c.a1 * c.b2 - c.a2 * c.b1;
    if det == 0.0 {
        return None;
    }
    let r2 = (c.a3 * c.b2 - c.a2 * c.b3) / det;
    let alpha2 = (c.a1 * c.b3 - c.b1 * c.a3) / det;
    (r2 > alpha2 && alpha2 > 0.0).then_some((r2, alpha2))
}

#[derive(Debug, Clone, Serialize)]
pub struct IclCriticalSet {
    pub origin: CriticalPoint,
    /// `+alpha_star v`, `-alpha_star v`.
    pub aligned: Vec<CriticalPoint>,
    /// `± sqrt(a3 / a1) e` for an orthonormal completion `e` of `v`.
    pub orthogonal: Vec<CriticalPoint>,
    pub off_axis: Option<(f64, f64)>,
}

/// Orthonormal basis of the complement of unit `v`.
pub fn orthonormal_complement(v: &DVector<f64>) -> Vec<DVector<f64>> {
    let d = v.len();
    let mut basis: Vec<DVector<f64>> = vec![v.clone()];
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        for b in &basis {
            let c = b.dot(&e);
            e.axpy(-c, b, 1.0);
        }
        let n = e.norm();
        if n > 1e-6 {
            basis.push(e / n);
        }
        if basis.len() == d {
            break;
        }
    }
    basis.remove(0);
    basis
}

/// The critical families of the infinite-prompt ICL risk. Orthogonal points
/// carry `d - 2` zero Hessian eigenvalues tangent to their sphere and are
/// labelled strict saddles.
pub fn icl_landscape(model: &SpikedWishartModel, lambda: f64) -> Result<IclCriticalSet> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be > 0".into()));
    }
    let c = icl_coefficients(model, lambda);
    let eval = |mu: DVector<f64>| -> Result<CriticalPoint> { point_from_eval(mu.clone(), &risk_icl_inf(&mu, model, lambda)?, None) };
    let origin = eval(DVector::zeros(model.dim()))?;
    let a = alpha_star(&c);
    let aligned = vec![eval(&model.spike * a)?, eval(&model.spike * -a)?];
    let radius = (c.a3 / c.a1).sqrt();
    let mut orthogonal = Vec::new();
    for e in orthonormal_complement(&model.spike) {
        for sign in [1.0, -1.0] {
            let mut p = eval(&e * (sign * radius))?;
            if p.hessian_spectrum[0] < 0.0 {
                p.kind = CriticalKind::StrictSaddle;
            }
            orthogonal.push(p);
        }
    }
    Ok(IclCriticalSet { origin, aligned, orthogonal, off_axis: off_axis_solution(&c) })
}

/// Lower Cholesky factor of `sigma` in column-major order, if positive definite.
fn cholesky(sigma: &DMatrix<f64>) -> Option<Vec<f64>> {
    let d = sigma.nrows();
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = sigma[(j, j)];
        for k in 0..j {
            diag -= l[k * d + j] * l[k * d + j];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[k * d + i] * l[k * d + j];
            }
            l[j * d + i] = s / ljj;
        }
    }
    Some(l)
}

/// Token factor for one covariance draw from `stream`.
///
/// The covariance consumes `stream.substream(0)`; prompts use the later
/// substreams. With `n >= d` tokens are `C z` for the Cholesky factor `C`;
/// otherwise `G z` with `G` the `d x n` matrix of Wishart draws.
fn draw_factor(model: &SpikedWishartModel, stream: RngStream) -> (Vec<f64>, usize) {
    let d = model.dim();
    let mut rng = stream.substream(0).rng();
    let mut g = vec![0.0; d * model.dof];
    for col in g.chunks_exact_mut(d) {
        model.draw_into(&mut rng, col);
    }
    if model.dof >= d {
        let gm = DMatrix::from_column_slice(d, model.dof, &g);
        if let Some(l) = cholesky(&(&gm * gm.transpose())) {
            return (l, d);
        }
    }
    (g, model.dof)
}

/// Per-covariance mean losses (and gradients) over `n_sigma` draws with
/// `n_prompt` prompts each; draw `s` lives on `stream.substream(s)`.
fn icl_batch(
    model: &SpikedWishartModel,
    param: &AttnParam,
    len: usize,
    n_sigma: usize,
    n_prompt: usize,
    stream: RngStream,
    with_gradient: bool,
) -> (Accumulator, Accumulator) {
    let d = model.dim();
    let mu = param.mu.as_slice();
    let parts = map_chunks(n_sigma, |range| {
        let mut outer = Accumulator::new(if with_gradient { d } else { 0 });
        let mut inner = Accumulator::new(0);
        let mut ws = Workspace::new(d, len);
        let mut grad = vec![0.0; d];
        for s in range {
            let sub = stream.substream(s as u64);
            let (factor, cols) = draw_factor(model, sub);
            let mut total = 0.0;
            grad.fill(0.0);
            for j in 0..n_prompt {
                let mut rng = sub.substream(1 + j as u64).rng();
                ws.sample(Sampler::Dense { factor: &factor, cols }, &mut rng);
                let loss = soft_loss_grad(&mut ws, mu, param.lambda, with_gradient.then_some(grad.as_mut_slice()));
                inner.push(loss);
                total += loss;
            }
            outer.push(total / n_prompt as f64);
            for (o, g) in outer.vec.iter_mut().zip(&grad) {
                *o += g / n_prompt as f64;
            }
        }
        (outer, inner)
    });
    let (outer, inner): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let empty = |n| Accumulator::new(n);
    (
        tree_reduce(outer, Accumulator::merge).unwrap_or_else(|| empty(if with_gradient { d } else { 0 })),
        tree_reduce(inner, Accumulator::merge).unwrap_or_else(|| empty(0)),
    )
}

/// Nested Monte Carlo estimate of the finite-prompt ICL risk. The standard
/// error is taken across covariance draws, or across prompts when there is
/// a single draw.
pub fn risk_icl_finite_mc(
    mu: &DVector<f64>,
    model: &SpikedWishartModel,
    lambda: f64,
    len: usize,
    n_sigma: usize,
    n_prompt: usize,
    rng: RngStream,
) -> Result<RiskEval> {
    check_dim(model.dim(), mu.len())?;
    if n_sigma == 0 || n_prompt == 0 || n_sigma * n_prompt < 2 || len == 0 {
        return Err(Error::InvalidArgument("need len >= 1 and at least 2 prompts in total".into()));
    }
    let param = AttnParam::new(mu.clone(), lambda)?;
    let (outer, inner) = icl_batch(model, &param, len, n_sigma, n_prompt, rng, true);
    let se = if n_sigma >= 2 { outer.std_error() } else { inner.std_error() };
    Ok(RiskEval {
        value: outer.mean(),
        gradient: Some(DVector::from_vec(outer.vec_mean())),
        hessian: None,
        mc_std_error: Some(se),
    })
}

/// The covariance draw that [`risk_icl_finite_mc`] uses at outer index `s`.
pub fn icl_mc_covariance(model: &SpikedWishartModel, rng: RngStream, s: u64) -> Result<CovarianceModel> {
    let (factor, cols) = draw_factor(model, rng.substream(s));
    let f = DMatrix::from_column_slice(model.dim(), cols, &factor);
    CovarianceModel::new_semidefinite(&f * f.transpose())
}

/// The infinite-prompt ICL risk as an optimisation objective.
#[derive(Debug, Clone, Copy)]
pub struct IclInfObjective<'a> {
    pub model: &'a SpikedWishartModel,
    pub lambda: f64,
}

impl Objective for IclInfObjective<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn value_grad(&self, mu: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let r = risk_icl_inf(mu, self.model, self.lambda)?;
        Ok((r.value, r.grad().clone()))
    }

    fn hessian(&self, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        risk_icl_inf(mu, self.model, self.lambda).ok().and_then(|r| r.hessian)
    }
}

/// SGD on the finite-prompt ICL risk: every step draws `batch_size` prompts,
/// each under its own fresh covariance. Alignment is measured against the spike.
pub fn icl_sgd(model: &SpikedWishartModel, template: &AttnParam, config: &OptimizerConfig) -> Result<OptTrace> {
    check_dim(model.dim(), template.dim())?;
    stochastic_descent(&template.mu, config, &model.spike, |mu, stream| {
        let p = AttnParam { mu: mu.clone(), lambda: template.lambda };
        let (outer, _) = icl_batch(model, &p, config.prompt_length, config.batch_size, 1, stream, true);
        (outer.mean(), DVector::from_vec(outer.vec_mean()))
    })
}
