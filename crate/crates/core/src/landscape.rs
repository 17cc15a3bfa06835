//! Critical points of the closed-form risks, their classification, predicted
//! local rates, and the empirical finite-prompt landscape.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::attention::AttnParam;
use crate::error::{Error, Result};
use crate::risk::{prompt_batch, risk_lin_finite, risk_soft_inf, Operator, RiskEval};
use crate::spectra::{symmetric_eigen, CovarianceModel, RngStream};

/// Relative tolerance under which a Hessian eigenvalue counts as zero.
pub const CLASSIFY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    LocalMax,
    StrictSaddle,
    LocalMin,
    Degenerate,
}

impl CriticalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CriticalKind::LocalMax => "local_max",
            CriticalKind::StrictSaddle => "strict_saddle",
            CriticalKind::LocalMin => "local_min",
            CriticalKind::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub location: DVector<f64>,
    pub kind: CriticalKind,
    /// Hessian eigenvalues, ascending.
    pub hessian_spectrum: Vec<f64>,
    /// 0-based index `j` of the eigenpair `(sigma_j, u_j)` the point sits on.
    pub eigenindex: Option<usize>,
    pub value: f64,
    pub grad_norm: f64,
}

/// Sign pattern of `spectrum` with zero band `CLASSIFY_TOL * max |eig|`.
pub fn classify_spectrum(spectrum: &[f64]) -> CriticalKind {
    let scale = spectrum.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = CLASSIFY_TOL * scale;
    let neg = spectrum.iter().filter(|&&x| x < -tol).count();
    let pos = spectrum.iter().filter(|&&x| x > tol).count();
    let n = spectrum.len();
    if scale == 0.0 || neg + pos < n {
        CriticalKind::Degenerate
    } else if neg == n {
        CriticalKind::LocalMax
    } else if pos == n {
        CriticalKind::LocalMin
    } else {
        CriticalKind::StrictSaddle
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn ascending_spectrum(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sym = (h + h.transpose()) * 0.5;
    let mut values = symmetric_eigen(&sym)?.values;
    values.reverse();
    Ok(values)
}

pub(crate) fn point_from_eval(location: DVector<f64>, eval: &RiskEval, eigenindex: Option<usize>) -> Result<CriticalPoint> {
    let hessian_spectrum = ascending_spectrum(eval.hess())?;
    Ok(CriticalPoint {
        kind: classify_spectrum(&hessian_spectrum),
        hessian_spectrum,
        eigenindex,
        value: eval.value,
        grad_norm: eval.grad().norm(),
        location,
    })
}

fn positive_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("critical points need lambda > 0, got {lambda}")))
    }
}

/// `{0} ∪ {± u_j / sqrt(lambda sigma_j)}` ordered `0, +u_1, -u_1, +u_2, ...`.
pub fn critical_points_soft_inf(cov: &CovarianceModel, lambda: f64) -> Result<Vec<CriticalPoint>> {
    cov.require_simple_spectrum()?;
    positive_lambda(lambda)?;
    let radii: Vec<f64> = cov.eigenvalues().iter().map(|s| 1.0 / (lambda * s).sqrt()).collect();
    enumerate_axis_points(cov, &radii, |mu| risk_soft_inf(&AttnParam::new(mu.clone(), lambda)?, cov))
}

/// Radius of the linear-attention critical point on `u_i`.
pub fn lin_critical_radius(tr: f64, sigma: f64, lambda: f64, len: usize) -> f64 {
    let n = len as f64;
    ((tr + (n + 1.0) * sigma) / (lambda / n * sigma * (n + 2.0) * (tr + (n + 3.0) * sigma))).sqrt()
}

/// `{0} ∪ {± gamma_i u_i}` for linear attention with prompts of length `len`.
pub fn critical_points_lin(cov: &CovarianceModel, lambda: f64, len: usize) -> Result<Vec<CriticalPoint>> {
    cov.require_simple_spectrum()?;
    positive_lambda(lambda)?;
    if len == 0 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    let tr = cov.trace();
    let radii: Vec<f64> = cov.eigenvalues().iter().map(|&s| lin_critical_radius(tr, s, lambda, len)).collect();
    enumerate_axis_points(cov, &radii, |mu| risk_lin_finite(&AttnParam::new(mu.clone(), lambda)?, cov, len))
}

fn enumerate_axis_points(
    cov: &CovarianceModel,
    radii: &[f64],
    eval: impl Fn(&DVector<f64>) -> Result<RiskEval>,
) -> Result<Vec<CriticalPoint>> {
    let d = cov.dim();
    let zero = DVector::zeros(d);
    let mut points = vec![point_from_eval(zero.clone(), &eval(&zero)?, None)?];
    for (j, r) in radii.iter().enumerate() {
        for sign in [1.0, -1.0] {
            let mu = cov.eigenvector(j) * (sign * r);
            let e = eval(&mu)?;
            points.push(point_from_eval(mu, &e, Some(j))?);
        }
    }
    Ok(points)
}

/// `2 lambda min{sigma_2 (sigma_1 - sigma_2), sigma_d (sigma_1 - sigma_d)}`.
pub fn predicted_rate_soft_inf(cov: &CovarianceModel, lambda: f64) -> Result<f64> {
    let s = cov.eigenvalues();
    if s.len() < 2 {
        return Err(Error::InvalidArgument("the predicted rate needs d >= 2".into()));
    }
    cov.require_simple_spectrum()?;
    positive_lambda(lambda)?;
    let d = s.len();
    Ok(2.0 * lambda * (s[1] * (s[0] - s[1])).min(s[d - 1] * (s[0] - s[d - 1])))
}

/// Outcome of one damped-Newton search on the sampled finite-prompt risk.
#[derive(Debug, Clone, Serialize)]
pub struct FinitePointReport {
    pub prompt_length: usize,
    pub eigenindex: Option<usize>,
    pub infinite_location: DVector<f64>,
    pub infinite_kind: CriticalKind,
    pub location: DVector<f64>,
    pub displacement: f64,
    pub kind: CriticalKind,
    pub hessian_spectrum: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inside_ball: bool,
}

impl FinitePointReport {
    pub fn classification_agrees(&self) -> bool {
        self.converged && self.kind == self.infinite_kind
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteLandscapeReport {
    pub lambda: f64,
    pub radius: f64,
    pub batch: usize,
    pub points: Vec<FinitePointReport>,
}

impl FiniteLandscapeReport {
    /// Reports for one eigenindex (`None` is the origin), in prompt-length order.
    pub fn track(&self, eigenindex: Option<usize>) -> Vec<&FinitePointReport> {
        self.points.iter().filter(|p| p.eigenindex == eigenindex).collect()
    }
}

pub const NEWTON_MAX_ITERS: usize = 50;

/// Locates finite-prompt critical points near each infinite-prompt one.
///
/// The sampled risk at length `L` uses the first `L` tokens of the same
/// `batch` prompts for every `L`, so it is an even, smooth function of `mu`
/// and only the `+u_j` representatives are searched. Each search is damped
/// Newton with a central-difference Hessian of the exact sampled gradient.
pub fn verify_finite_prompt_landscape(
    cov: &CovarianceModel,
    lambda: f64,
    lengths: &[usize],
    radius: f64,
    batch: usize,
    rng: RngStream,
) -> Result<FiniteLandscapeReport> {
    if batch < 2 {
        return Err(Error::InvalidArgument("batch must be >= 2".into()));
    }
    if lengths.iter().any(|&l| l < 2) {
        return Err(Error::InvalidArgument("prompt lengths must be >= 2".into()));
    }
    let infinite = critical_points_soft_inf(cov, lambda)?;
    let starts: Vec<&CriticalPoint> = infinite.iter().step_by(2).collect();
    let mut points = Vec::new();
    for &len in lengths {
        let grad = |mu: &DVector<f64>| -> DVector<f64> {
            let p = AttnParam { mu: mu.clone(), lambda };
            DVector::from_vec(prompt_batch(Operator::Softmax, cov, len, batch, rng, &p, true).vec_mean())
        };
        for start in &starts {
            let out = damped_newton(&grad, start.location.clone());
            let spectrum = ascending_spectrum(&out.hessian)?;
            points.push(FinitePointReport {
                prompt_length: len,
                eigenindex: start.eigenindex,
                infinite_location: start.location.clone(),
                infinite_kind: start.kind,
                displacement: (&out.location - &start.location).norm(),
                kind: classify_spectrum(&spectrum),
                hessian_spectrum: spectrum,
                grad_norm: out.grad_norm,
                iterations: out.iterations,
                converged: out.converged,
                inside_ball: out.location.norm() <= radius,
                location: out.location,
            });
        }
    }
    Ok(FiniteLandscapeReport { lambda, radius, batch, points })
}

struct NewtonOutcome {
    location: DVector<f64>,
    hessian: DMatrix<f64>,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

fn fd_jacobian(grad: &impl Fn(&DVector<f64>) -> DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let d = mu.len();
    let h = 1e-5 * (1.0 + mu.norm());
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut plus = mu.clone();
        let mut minus = mu.clone();
        plus[j] += h;
        minus[j] -= h;
        jac.set_column(j, &((grad(&plus) - grad(&minus)) / (2.0 * h)));
    }
    (&jac + jac.transpose()) * 0.5
}

fn damped_newton(grad: &impl Fn(&DVector<f64>) -> DVector<f64>, mut mu: DVector<f64>) -> NewtonOutcome {
    let mut g = grad(&mu);
    let mut hess = fd_jacobian(grad, &mu);
    for iter in 0..NEWTON_MAX_ITERS {
        let tol = 1e-9 * (1.0 + hess.norm());
        if g.norm() <= tol {
            return NewtonOutcome { grad_norm: g.norm(), location: mu, hessian: hess, iterations: iter, converged: true };
        }
        let Some(step) = hess.clone().lu().solve(&(-&g)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &mu + &step * t;
            let gc = grad(&cand);
            if gc.norm() < g.norm() {
                mu = cand;
                g = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        hess = fd_jacobian(grad, &mu);
    }
    let tol = 1e-9 * (1.0 + hess.norm());
    NewtonOutcome {
        converged: g.norm() <= tol,
        grad_norm: g.norm(),
        location: mu,
        hessian: hess,
        iterations: NEWTON_MAX_ITERS,
    }
}
