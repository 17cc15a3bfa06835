//! Output-law diagnostics for softmax attention at the first query: the
//! rank-one limit covariance `Gamma(mu)`, Bures-Wasserstein distances, and
//! finite-`L` concentration sweeps with coupled (prefix-shared) prompts.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attention::AttnParam;
use crate::error::{check_dim, Error, Result};
use crate::mc::{map_chunks, tree_reduce, Accumulator};
use crate::spectra::{relative_asymmetry, symmetric_eigen, CovarianceModel, RngStream};

/// A centered Gaussian law `N(0, C)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenteredGaussian {
    covariance: DMatrix<f64>,
}

impl CenteredGaussian {
    /// Symmetric within `1e-10` (relative) with eigenvalues `>= -1e-10`;
    /// small negative eigenvalues are clamped to zero.
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(covariance.nrows(), covariance.ncols())?;
        let asym = relative_asymmetry(&covariance);
        if asym > 1e-10 {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eig = symmetric_eigen(&sym)?;
        let scale = eig.values[0].abs().max(1.0);
        let smallest = *eig.values.last().unwrap();
        if smallest < -1e-10 * scale {
            return Err(Error::NotPositiveDefinite(smallest));
        }
        if smallest >= 0.0 {
            return Ok(Self { covariance: sym });
        }
        Ok(Self { covariance: eig_function(&eig.values, &eig.vectors, |s| s.max(0.0)) })
    }

    pub fn zero(d: usize) -> Self {
        Self { covariance: DMatrix::zeros(d, d) }
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }
}

fn eig_function(values: &[f64], vectors: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &s) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(f(s));
    }
    scaled * vectors.transpose()
}

/// Eigenvalues below this fraction of the largest are rounding noise and are
/// zeroed before square roots, where `sqrt` would amplify them.
pub const SQRT_RANK_TOL: f64 = 1e-12;

/// Square root of a symmetric PSD matrix, clamping eigenvalues at or below
/// `SQRT_RANK_TOL` times the largest to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = symmetric_eigen(&sym)?;
    let floor = SQRT_RANK_TOL * eig.values[0].max(0.0);
    Ok(eig_function(&eig.values, &eig.vectors, |s| if s > floor { s.sqrt() } else { 0.0 }))
}

/// `Gamma(mu) = lambda^2 (mu^T Sigma mu) (Sigma mu)(Sigma mu)^T`.
pub fn gamma_of(mu: &DVector<f64>, cov: &CovarianceModel, lambda: f64) -> Result<CenteredGaussian> {
    check_dim(cov.dim(), mu.len())?;
    let sm = cov.apply(mu);
    let a = mu.dot(&sm);
    Ok(CenteredGaussian { covariance: &sm * sm.transpose() * (lambda * lambda * a) })
}

/// Squared Bures-Wasserstein distance
/// `tr C1 + tr C2 - 2 tr (C1^{1/2} C2 C1^{1/2})^{1/2}`.
pub fn bures_w2(g1: &CenteredGaussian, g2: &CenteredGaussian) -> Result<f64> {
    check_dim(g1.dim(), g2.dim())?;
    let r1 = psd_sqrt(&g1.covariance)?;
    let inner = &r1 * &g2.covariance * &r1;
    let cross = psd_sqrt(&inner)?.trace();
    Ok((g1.covariance.trace() + g2.covariance.trace() - 2.0 * cross).max(0.0))
}

/// Exact squared 2-Wasserstein distance between the empirical law of
/// `samples` and `N(0, variance)`, by integrating the quantile coupling over
/// each order-statistic bin.
pub fn w2_empirical_vs_gaussian_1d(samples: &[f64], variance: f64) -> Result<f64> {
    if samples.is_empty() || !(variance >= 0.0) {
        return Err(Error::InvalidArgument("need samples and a nonnegative variance".into()));
    }
    let mut y = samples.to_vec();
    y.sort_by(f64::total_cmp);
    let n = y.len() as f64;
    let second: f64 = y.iter().map(|v| v * v).sum::<f64>() / n;
    if variance == 0.0 {
        return Ok(second);
    }
    let std = Normal::new(0.0, 1.0).unwrap();
    let sd = variance.sqrt();
    let pdf = |z: f64| if z.is_finite() { (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() } else { 0.0 };
    // Integral of Phi^{-1} over bin i is pdf(z_{i-1}) - pdf(z_i).
    let mut z_prev = f64::NEG_INFINITY;
    let mut cross = 0.0;
    for (i, v) in y.iter().enumerate() {
        let t = (i + 1) as f64 / n;
        let z = if i + 1 == y.len() { f64::INFINITY } else { std.inverse_cdf(t) };
        cross += v * (pdf(z_prev) - pdf(z));
        z_prev = z;
    }
    Ok((second - 2.0 * sd * cross + variance).max(0.0))
}

/// Online softmax state for the query `X_1` over a growing prompt, with the
/// sums needed for the output and its Jacobian in `mu`.
struct OnlineSoftmax {
    d: usize,
    jac: bool,
    shift: f64,
    s0: f64,
    s1: Vec<f64>,
    sp: f64,
    sxp: Vec<f64>,
    sxx: Vec<f64>,
}

impl OnlineSoftmax {
    fn new(d: usize, jac: bool) -> Self {
        let m = if jac { d } else { 0 };
        Self { d, jac, shift: f64::NEG_INFINITY, s0: 0.0, s1: vec![0.0; d], sp: 0.0, sxp: vec![0.0; m], sxx: vec![0.0; m * m] }
    }

    fn push(&mut self, x: &[f64], score: f64, p: f64) {
        if score > self.shift {
            let r = (self.shift - score).exp();
            self.shift = score;
            self.s0 *= r;
            self.sp *= r;
            self.s1.iter_mut().chain(self.sxp.iter_mut()).chain(self.sxx.iter_mut()).for_each(|v| *v *= r);
        }
        let w = (score - self.shift).exp();
        self.s0 += w;
        for (s, xi) in self.s1.iter_mut().zip(x) {
            *s += w * xi;
        }
        if self.jac {
            self.sp += w * p;
            for (s, xi) in self.sxp.iter_mut().zip(x) {
                *s += w * p * xi;
            }
            for (j, xj) in x.iter().enumerate() {
                let wx = w * xj;
                for (s, xi) in self.sxx[j * self.d..(j + 1) * self.d].iter_mut().zip(x) {
                    *s += wx * xi;
                }
            }
        }
    }

    fn output(&self) -> DVector<f64> {
        DVector::from_iterator(self.d, self.s1.iter().map(|s| s / self.s0))
    }

    /// `lambda [(E_w[X p] - p_bar T) X_1^T + q (E_w[X X^T] - T T^T)]`.
    fn jacobian(&self, x1: &DVector<f64>, q: f64, lambda: f64) -> DMatrix<f64> {
        let t = self.output();
        let pbar = self.sp / self.s0;
        let exp = DVector::from_iterator(self.d, self.sxp.iter().map(|s| s / self.s0)) - &t * pbar;
        let second = DMatrix::from_column_slice(self.d, self.d, &self.sxx) / self.s0 - &t * t.transpose();
        (exp * x1.transpose() + second * q) * lambda
    }
}

/// Final-`L` outputs (or Jacobians) along one prompt. `tokens` is row-major
/// and `lens` ascending; the result has one entry per length.
fn run_prompt(tokens: &[f64], d: usize, mu: &DVector<f64>, lambda: f64, lens: &[usize], jac: bool) -> Vec<DMatrix<f64>> {
    let x1 = DVector::from_column_slice(&tokens[..d]);
    let q = mu.dot(&x1);
    let mut state = OnlineSoftmax::new(d, jac);
    let mut out = Vec::with_capacity(lens.len());
    let mut next = 0;
    for (k, x) in tokens.chunks_exact(d).enumerate() {
        let p: f64 = x.iter().zip(mu.iter()).map(|(a, b)| a * b).sum();
        state.push(x, lambda * q * p, p);
        while next < lens.len() && lens[next] == k + 1 {
            out.push(if jac { state.jacobian(&x1, q, lambda) } else { DMatrix::from_column_slice(d, 1, state.output().as_slice()) });
            next += 1;
        }
        if next == lens.len() {
            break;
        }
    }
    out
}

fn draw_tokens(cov: &CovarianceModel, len: usize, stream: RngStream) -> Vec<f64> {
    let d = cov.dim();
    let mut rng = stream.rng();
    let mut scratch = vec![0.0; d];
    let mut tokens = vec![0.0; d * len];
    for x in tokens.chunks_exact_mut(d) {
        cov.sample_into(&mut rng, &mut scratch, x);
    }
    tokens
}

fn check_lengths(lens: &[usize], min: usize) -> Result<()> {
    if lens.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} prompt lengths")));
    }
    if lens[0] == 0 || lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("prompt lengths must be positive and strictly ascending".into()));
    }
    Ok(())
}

fn merge_per_len(a: Vec<Accumulator>, b: Vec<Accumulator>) -> Vec<Accumulator> {
    a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect()
}

/// Second-moment matrix of `T_L(X)_1` over `n_samples` prompts; prompt `i`
/// is drawn from `rng.substream(i)`.
pub fn empirical_output_law(cov: &CovarianceModel, param: &AttnParam, len: usize, n_samples: usize, rng: RngStream) -> Result<CenteredGaussian> {
    let laws = output_laws(cov, param, &[len], n_samples, rng)?;
    Ok(laws.into_iter().next().unwrap().0)
}

/// Per length: the empirical second moment and the projections `<T_L, u_1>`.
fn output_laws(cov: &CovarianceModel, param: &AttnParam, lens: &[usize], n_samples: usize, rng: RngStream) -> Result<Vec<(CenteredGaussian, Vec<f64>)>> {
    check_dim(cov.dim(), param.dim())?;
    check_lengths(lens, 1)?;
    let d = cov.dim();
    if n_samples < d + 1 {
        return Err(Error::InvalidArgument(format!("need n_samples >= d + 1 = {}", d + 1)));
    }
    let u1 = cov.eigenvector(0);
    let lmax = *lens.last().unwrap();
    let parts = map_chunks(n_samples, |range| {
        let mut moments = vec![DMatrix::<f64>::zeros(d, d); lens.len()];
        let mut proj = vec![Vec::with_capacity(range.len()); lens.len()];
        for i in range {
            let tokens = draw_tokens(cov, lmax, rng.substream(i as u64));
            for (j, t) in run_prompt(&tokens, d, &param.mu, param.lambda, lens, false).into_iter().enumerate() {
                let t = t.column(0).into_owned();
                moments[j] += &t * t.transpose();
                proj[j].push(t.dot(&u1));
            }
        }
        (moments, proj)
    });
    let (moments, proj) = tree_reduce(parts, |(ma, mut pa), (mb, pb)| {
        let m = ma.into_iter().zip(mb).map(|(x, y)| x + y).collect();
        pa.iter_mut().zip(pb).for_each(|(a, b)| a.extend(b));
        (m, pa)
    })
    .unwrap();
    moments
        .into_iter()
        .zip(proj)
        .map(|(m, p)| Ok((CenteredGaussian::new(m / n_samples as f64)?, p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationRow {
    pub len: usize,
    pub estimate: f64,
    pub std_error: f64,
    /// `psi_k(L)` with `eps_k = 1 / (16 (k + 3)^2 lambda^2 a^2 + 1)`, scaled to
    /// the estimate at the first length.
    pub bound: f64,
    /// The same with `eps = 1 / (144 lambda^2 a^2 + 1)`.
    pub bound_alt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationTable {
    pub order: usize,
    pub rows: Vec<ConcentrationRow>,
    pub epsilon: f64,
    pub epsilon_alt: f64,
    /// Least-squares slope of `ln estimate` against `ln L`.
    pub slope: f64,
}

impl ConcentrationTable {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].estimate < w[0].estimate)
    }
}

/// `L^{-eps} (1 + ln L)^{1 - eps}`.
pub fn psi(len: usize, eps: f64) -> f64 {
    let l = len as f64;
    l.powf(-eps) * (1.0 + l.ln()).powf(1.0 - eps)
}

/// `1 / (16 (k + 3)^2 lambda^2 a^2 + 1)`.
pub fn epsilon_k(order: usize, lambda: f64, a: f64) -> f64 {
    let k = order as f64 + 3.0;
    1.0 / (16.0 * k * k * lambda * lambda * a * a + 1.0)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// `E ||D^k_mu T_L(X)_1 - D^k_mu T_inf(X_1)||_F^2` per prompt length, with
/// the same tokens driving both operators and every length of one sample
/// sharing a prefix. Order 1 uses the analytic Jacobian; order 2 central
/// differences of it.
pub fn concentration_sweep(
    cov: &CovarianceModel,
    param: &AttnParam,
    order: usize,
    lens: &[usize],
    n_samples: usize,
    rng: RngStream,
) -> Result<ConcentrationTable> {
    check_dim(cov.dim(), param.dim())?;
    check_lengths(lens, 3)?;
    if order > 2 {
        return Err(Error::InvalidArgument(format!("derivative order must be 0, 1 or 2, got {order}")));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let d = cov.dim();
    let (mu, lambda) = (&param.mu, param.lambda);
    let sigma = cov.matrix();
    let sm = cov.apply(mu);
    let lmax = *lens.last().unwrap();
    let h = 1e-4 * (1.0 + mu.norm());
    let shifted: Vec<(DVector<f64>, DVector<f64>)> = (0..if order == 2 { d } else { 0 })
        .map(|j| {
            let (mut p, mut m) = (mu.clone(), mu.clone());
            p[j] += h;
            m[j] -= h;
            (p, m)
        })
        .collect();

    let parts = map_chunks(n_samples, |range| {
        let mut accs = vec![Accumulator::new(0); lens.len()];
        for i in range {
            let tokens = draw_tokens(cov, lmax, rng.substream(i as u64));
            let x1 = DVector::from_column_slice(&tokens[..d]);
            let errs: Vec<f64> = match order {
                0 => {
                    let limit = &sm * (lambda * mu.dot(&x1));
                    run_prompt(&tokens, d, mu, lambda, lens, false).iter().map(|t| (t.column(0) - &limit).norm_squared()).collect()
                }
                1 => {
                    let limit = (sigma * mu.dot(&x1) + &sm * x1.transpose()) * lambda;
                    run_prompt(&tokens, d, mu, lambda, lens, true).iter().map(|j| (j - &limit).norm_squared()).collect()
                }
                _ => {
                    let mut errs = vec![0.0; lens.len()];
                    for (j, (p, m)) in shifted.iter().enumerate() {
                        let jp = run_prompt(&tokens, d, p, lambda, lens, true);
                        let jm = run_prompt(&tokens, d, m, lambda, lens, true);
                        // Column i of the limit is lambda (x_j Sigma e_i + x_i Sigma e_j).
                        let limit = (sigma * x1[j] + sigma.column(j) * x1.transpose()) * lambda;
                        for (e, (a, b)) in errs.iter_mut().zip(jp.iter().zip(&jm)) {
                            *e += ((a - b) / (2.0 * h) - &limit).norm_squared();
                        }
                    }
                    errs
                }
            };
            for (acc, e) in accs.iter_mut().zip(errs) {
                acc.push(e);
            }
        }
        accs
    });
    let accs = tree_reduce(parts, merge_per_len).unwrap();

    let a = mu.dot(&sm);
    let epsilon = epsilon_k(order, lambda, a);
    let epsilon_alt = 1.0 / (144.0 * lambda * lambda * a * a + 1.0);
    let first = accs[0].mean();
    let rows: Vec<ConcentrationRow> = lens
        .iter()
        .zip(&accs)
        .map(|(&len, acc)| ConcentrationRow {
            len,
            estimate: acc.mean(),
            std_error: acc.std_error(),
            bound: first * psi(len, epsilon) / psi(lens[0], epsilon),
            bound_alt: first * psi(len, epsilon_alt) / psi(lens[0], epsilon_alt),
        })
        .collect();
    let xs: Vec<f64> = lens.iter().map(|&l| l as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    Ok(ConcentrationTable { order, rows, epsilon, epsilon_alt, slope: log_log_slope(&xs, &ys) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W2Row {
    pub len: usize,
    /// Bures distance from the empirical second moment to `Gamma(mu)`; a
    /// surrogate, since the finite-`L` law is not Gaussian.
    pub bures_surrogate: f64,
    /// Exact `W_2^2` between the empirical law of `<T_L, u_1>` and
    /// `N(0, u_1^T Gamma(mu) u_1)`.
    pub projected_exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W2Table {
    pub rows: Vec<W2Row>,
}

impl W2Table {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].bures_surrogate < w[0].bures_surrogate && w[1].projected_exact < w[0].projected_exact)
    }
}

/// Both W2 probes at the trained optimum `u_1 / sqrt(lambda sigma_1)`.
pub fn w2_convergence_probe(cov: &CovarianceModel, lambda: f64, lens: &[usize], n_samples: usize, rng: RngStream) -> Result<W2Table> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be > 0".into()));
    }
    let (s1, u1) = cov.principal();
    let param = AttnParam::new(u1 / (lambda * s1).sqrt(), lambda)?;
    w2_probe_at(cov, &param, lens, n_samples, rng)
}

/// Both W2 probes against `N(0, Gamma(mu))` at an arbitrary parameter.
pub fn w2_probe_at(cov: &CovarianceModel, param: &AttnParam, lens: &[usize], n_samples: usize, rng: RngStream) -> Result<W2Table> {
    check_lengths(lens, 1)?;
    let target = gamma_of(&param.mu, cov, param.lambda)?;
    let u1 = cov.eigenvector(0);
    let var = u1.dot(&(target.covariance() * &u1)).max(0.0);
    let rows = output_laws(cov, param, lens, n_samples, rng)?
        .into_iter()
        .zip(lens)
        .map(|((law, proj), &len)| {
            Ok(W2Row { len, bures_surrogate: bures_w2(&law, &target)?, projected_exact: w2_empirical_vs_gaussian_1d(&proj, var)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(W2Table { rows })
}
