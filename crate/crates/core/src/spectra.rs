//! Covariance models, the symmetric eigensolver, Gaussian prompt sampling and
//! closed-form Gaussian moments.
//!
//! Every covariance carries its eigendecomposition: eigenvalues in descending
//! order, orthonormal eigenvectors as columns, each eigenvector signed so that
//! its entry of largest magnitude is positive.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative gap below which two eigenvalues are treated as equal.
pub const SIMPLE_SPECTRUM_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// A reproducible random stream: a ChaCha8 generator keyed by `seed` and
/// positioned on the independent stream `stream_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream number `index`. Children of distinct parents or with
    /// distinct indices land on unrelated stream ids.
    pub fn substream(&self, index: u64) -> Self {
        let mixed = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)));
        Self { seed: self.seed, stream_id: mixed }
    }
}

impl fmt::Display for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#018x}", self.seed, self.stream_id)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Eigenvalues (descending) and matching orthonormal eigenvectors (columns).
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Only the upper triangle is read. Rotations use the small-angle form of
/// Rutishauser, and a sweep ends the iteration once every off-diagonal entry is
/// negligible against its diagonal pair.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    check_dim(n, matrix.ncols())?;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            a[i * n + j] = matrix[(i, j)];
            a[j * n + i] = matrix[(i, j)];
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_rp = arp - s * (arq + tau * arp);
                    let new_rq = arq + s * (arp - tau * arq);
                    a[r * n + p] = new_rp;
                    a[p * n + r] = new_rp;
                    a[r * n + q] = new_rq;
                    a[q * n + r] = new_rq;
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = vrp - s * (vrq + tau * vrp);
                    v[r * n + q] = vrq + s * (vrp - tau * vrq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::EigenNoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 0..n {
            if v[r * n + src].abs() > v[pivot * n + src].abs() {
                pivot = r;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[(r, col)] = sign * v[r * n + src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Relative asymmetry `max |m_ij - m_ji| / max |m_ij|`.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (&(m - m.transpose())).amax() / scale
}

/// A symmetric positive (semi)definite token covariance with its cached
/// eigendecomposition and sampling factor `U diag(sqrt(sigma))`.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl CovarianceModel {
    /// Builds a positive definite covariance. The input is symmetrised after
    /// the symmetry check.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let model = Self::build(matrix)?;
        let smallest = *model.eigenvalues.last().unwrap();
        if !(smallest > 0.0) {
            return Err(Error::NotPositiveDefinite(smallest));
        }
        Ok(model)
    }

    /// Like [`CovarianceModel::new`], but accepts rank-deficient matrices.
    /// Eigenvalues within rounding of zero are clamped to zero.
    pub fn new_semidefinite(matrix: DMatrix<f64>) -> Result<Self> {
        let mut model = Self::build(matrix)?;
        let top = model.eigenvalues[0].abs().max(f64::MIN_POSITIVE);
        let smallest = *model.eigenvalues.last().unwrap();
        if smallest < -1e-10 * top {
            return Err(Error::NotPositiveDefinite(smallest));
        }
        for s in model.eigenvalues.iter_mut() {
            *s = s.max(0.0);
        }
        model.factor = sampling_factor(&model.eigenvalues, &model.eigenvectors);
        Ok(model)
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    fn build(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 {
            return Err(Error::InvalidArgument("covariance must have dimension >= 1".into()));
        }
        check_dim(matrix.nrows(), matrix.ncols())?;
        let asym = relative_asymmetry(&matrix);
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let eig = symmetric_eigen(&matrix)?;
        let factor = sampling_factor(&eig.values, &eig.vectors);
        Ok(Self { matrix, eigenvalues: eig.values, eigenvectors: eig.vectors, factor })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Eigenvalues, largest first.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Unit eigenvector `j` (0-based, so `eigenvector(0)` is the principal one).
    pub fn eigenvector(&self, j: usize) -> DVector<f64> {
        self.eigenvectors.column(j).into_owned()
    }

    pub fn principal(&self) -> (f64, DVector<f64>) {
        (self.eigenvalues[0], self.eigenvector(0))
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `Sigma v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    /// `Sigma^p v` through the eigendecomposition.
    pub fn apply_power(&self, v: &DVector<f64>, p: f64) -> DVector<f64> {
        let coeffs = self.eigenvectors.tr_mul(v);
        let scaled = DVector::from_iterator(
            self.dim(),
            coeffs.iter().zip(&self.eigenvalues).map(|(c, s)| c * s.powf(p)),
        );
        &self.eigenvectors * scaled
    }

    /// `Sigma^p` as a dense matrix.
    pub fn power_matrix(&self, p: f64) -> DMatrix<f64> {
        let d = DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|s| s.powf(p)));
        &self.eigenvectors * DMatrix::from_diagonal(&d) * self.eigenvectors.transpose()
    }

    /// Smallest relative gap `(sigma_j - sigma_{j+1}) / sigma_1` and where it occurs.
    pub fn min_relative_gap(&self) -> (f64, usize) {
        let top = self.eigenvalues[0];
        self.eigenvalues
            .windows(2)
            .enumerate()
            .map(|(j, w)| ((w[0] - w[1]) / top, j))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .unwrap_or((f64::INFINITY, 0))
    }

    pub fn simple_spectrum(&self) -> bool {
        self.min_relative_gap().0 > SIMPLE_SPECTRUM_TOL
    }

    pub fn require_simple_spectrum(&self) -> Result<()> {
        let (gap, index) = self.min_relative_gap();
        if gap > SIMPLE_SPECTRUM_TOL {
            Ok(())
        } else {
            Err(Error::NonSimpleSpectrum { gap, index })
        }
    }

    /// Draws one token `x = U diag(sqrt(sigma)) z` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut [f64], out: &mut [f64]) {
        sample_factor_into(self.factor.as_slice(), self.dim(), rng, scratch, out);
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let mut scratch = vec![0.0; d];
        let mut out = DVector::zeros(d);
        self.sample_into(rng, &mut scratch, out.as_mut_slice());
        out
    }
}

/// Draws `F z` with `z` standard normal, where `factor` holds a `d x k` matrix
/// `F` in column-major order. `scratch` needs room for `k` values and `out`
/// for `d`.
pub fn sample_factor_into<R: Rng + ?Sized>(
    factor: &[f64],
    d: usize,
    rng: &mut R,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let k = factor.len() / d;
    for z in scratch.iter_mut().take(k) {
        *z = rng.sample(StandardNormal);
    }
    out[..d].fill(0.0);
    for (j, &z) in scratch.iter().take(k).enumerate() {
        let col = &factor[j * d..(j + 1) * d];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * z;
        }
    }
}

fn sampling_factor(values: &[f64], vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = vectors.clone();
    for (j, s) in values.iter().enumerate() {
        f.column_mut(j).scale_mut(s.max(0.0).sqrt());
    }
    f
}

/// `Sigma = A A^T + 0.1 I` with `A` filled with i.i.d. standard normals.
pub fn build_experiment_covariance(d: usize, stream: RngStream) -> Result<CovarianceModel> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let mut rng = stream.rng();
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    CovarianceModel::new(sigma)
}

/// `L` tokens stored row-major (`tokens[k * dim .. (k + 1) * dim]` is token `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    tokens: Vec<f64>,
    dim: usize,
    seed_tag: Option<RngStream>,
}

impl Prompt {
    pub fn from_tokens(tokens: &[DVector<f64>]) -> Result<Self> {
        let dim = tokens.first().map(|t| t.len()).ok_or_else(|| {
            Error::InvalidArgument("a prompt needs at least one token".into())
        })?;
        let mut flat = Vec::with_capacity(dim * tokens.len());
        for t in tokens {
            check_dim(dim, t.len())?;
            flat.extend_from_slice(t.as_slice());
        }
        Ok(Self { tokens: flat, dim, seed_tag: None })
    }

    pub fn from_flat(tokens: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || tokens.is_empty() || tokens.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form tokens of dimension {dim}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, dim, seed_tag: None })
    }

    /// Samples `len` i.i.d. tokens from `cov` using `rng`.
    pub fn sample_with<R: Rng + ?Sized>(cov: &CovarianceModel, len: usize, rng: &mut R) -> Self {
        let d = cov.dim();
        let mut tokens = vec![0.0; len * d];
        let mut scratch = vec![0.0; d];
        for k in 0..len {
            cov.sample_into(rng, &mut scratch, &mut tokens[k * d..(k + 1) * d]);
        }
        Self { tokens, dim: d, seed_tag: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, k: usize) -> &[f64] {
        &self.tokens[k * self.dim..(k + 1) * self.dim]
    }

    pub fn token_vector(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.token(k))
    }

    pub fn flat(&self) -> &[f64] {
        &self.tokens
    }

    pub fn seed_tag(&self) -> Option<RngStream> {
        self.seed_tag
    }
}

/// Samples a prompt of `len` tokens on its own stream.
pub fn sample_prompt(cov: &CovarianceModel, len: usize, stream: RngStream) -> Result<Prompt> {
    if len == 0 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    let mut prompt = Prompt::sample_with(cov, len, &mut stream.rng());
    prompt.seed_tag = Some(stream);
    Ok(prompt)
}

/// Closed-form Gaussian moments for `X1, X2 ~ N(0, Sigma)` i.i.d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaussianMoment {
    /// `E ||X1||^2`
    SquaredNorm,
    /// `E <X1, mu>^2`
    Projection,
    /// `E <X1, X2> <X1, mu> <X2, mu>`
    CrossProjection,
    /// `E <X1, X2> <X1, mu>^3 <X2, mu>`
    CubicCross,
    /// `E <X1, mu>^2 ||X1||^2`
    ProjectedNorm,
    /// `E <X1, mu>^4 ||X1||^2`
    QuarticProjectedNorm,
}

impl GaussianMoment {
    pub const ALL: [GaussianMoment; 6] = [
        GaussianMoment::SquaredNorm,
        GaussianMoment::Projection,
        GaussianMoment::CrossProjection,
        GaussianMoment::CubicCross,
        GaussianMoment::ProjectedNorm,
        GaussianMoment::QuarticProjectedNorm,
    ];

    pub fn from_index(index: u32) -> Result<Self> {
        match index {
            1..=6 => Ok(Self::ALL[index as usize - 1]),
            _ => Err(Error::UnknownMoment(index.to_string())),
        }
    }
}

impl FromStr for GaussianMoment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u32>()
            .map_err(|_| Error::UnknownMoment(s.to_string()))
            .and_then(Self::from_index)
    }
}

pub fn gaussian_moment_oracle(kind: GaussianMoment, cov: &CovarianceModel, mu: &DVector<f64>) -> Result<f64> {
    check_dim(cov.dim(), mu.len())?;
    let s_mu = cov.apply(mu);
    let a = mu.dot(&s_mu);
    let b = s_mu.dot(&s_mu);
    let tr = cov.trace();
    Ok(match kind {
        GaussianMoment::SquaredNorm => tr,
        GaussianMoment::Projection => a,
        GaussianMoment::CrossProjection => b,
        GaussianMoment::CubicCross => 3.0 * a * b,
        GaussianMoment::ProjectedNorm => tr * a + 2.0 * b,
        GaussianMoment::QuarticProjectedNorm => 3.0 * tr * a * a + 12.0 * a * b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_covariance() {
        let stream = RngStream::new(11, 0);
        let a = stream.rng().sample::<f64, _>(StandardNormal);
        let cov = build_experiment_covariance(1, stream).unwrap();
        assert!((cov.eigenvalues()[0] - (a * a + 0.1)).abs() < 1e-14);
        assert_eq!(cov.eigenvector(0)[0], 1.0);
    }

    #[test]
    fn experiment_covariance_is_shifted() {
        for seed in 0..20 {
            let cov = build_experiment_covariance(5, RngStream::new(seed, 3)).unwrap();
            assert!(*cov.eigenvalues().last().unwrap() >= 0.1 - 1e-12);
        }
    }

    #[test]
    fn eigen_invariants() {
        let cov = build_experiment_covariance(6, RngStream::new(5, 0)).unwrap();
        let u = cov.eigenvectors();
        let gram = u.transpose() * u;
        assert!((gram - DMatrix::identity(6, 6)).amax() < 1e-10);
        assert!(cov.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let recon = u * DMatrix::from_diagonal(&DVector::from_column_slice(cov.eigenvalues())) * u.transpose();
        assert!((recon - cov.matrix()).norm() / cov.matrix().norm() <= 1e-10);
        for j in 0..6 {
            let col = cov.eigenvector(j);
            let pivot = col.iamax();
            assert!(col[pivot] > 0.0);
        }
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(CovarianceModel::new(m), Err(Error::NotSymmetric(_))));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(CovarianceModel::new(m), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn simple_spectrum_threshold() {
        assert!(CovarianceModel::diagonal(&[2.0, 1.0]).unwrap().simple_spectrum());
        assert!(!CovarianceModel::diagonal(&[1.0, 1.0 + 1e-10]).unwrap().simple_spectrum());
        assert!(CovarianceModel::diagonal(&[3.0]).unwrap().simple_spectrum());
    }

    #[test]
    fn stream_determinism_and_independence() {
        let cov = CovarianceModel::diagonal(&[2.0, 1.0, 0.5]).unwrap();
        let s = RngStream::new(42, 7);
        let p1 = sample_prompt(&cov, 16, s).unwrap();
        let p2 = sample_prompt(&cov, 16, s).unwrap();
        assert_eq!(p1.flat(), p2.flat());
        let p3 = sample_prompt(&cov, 16, s.substream(1)).unwrap();
        assert_ne!(p1.flat(), p3.flat());
        assert_ne!(s.substream(1), s.substream(2));
    }

    #[test]
    fn single_token_prompt() {
        let cov = CovarianceModel::diagonal(&[2.0, 1.0]).unwrap();
        let p = sample_prompt(&cov, 1, RngStream::new(0, 0)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.token(0).len(), 2);
        assert!(sample_prompt(&cov, 0, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn moment_oracle_examples() {
        let cov = CovarianceModel::diagonal(&[2.0, 1.0]).unwrap();
        let e1 = DVector::from_column_slice(&[1.0, 0.0]);
        let zero = DVector::zeros(2);
        assert_eq!(gaussian_moment_oracle(GaussianMoment::SquaredNorm, &cov, &e1).unwrap(), 3.0);
        assert_eq!(gaussian_moment_oracle(GaussianMoment::Projection, &cov, &zero).unwrap(), 0.0);
        assert_eq!(gaussian_moment_oracle(GaussianMoment::QuarticProjectedNorm, &cov, &e1).unwrap(), 132.0);
        assert!(matches!(GaussianMoment::from_index(7), Err(Error::UnknownMoment(_))));
        assert!("abc".parse::<GaussianMoment>().is_err());
        assert_eq!("6".parse::<GaussianMoment>().unwrap(), GaussianMoment::QuarticProjectedNorm);
    }

    #[test]
    fn apply_power_matches_dense() {
        let cov = build_experiment_covariance(4, RngStream::new(9, 0)).unwrap();
        let v = DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.5]);
        let s2 = cov.matrix() * cov.matrix() * &v;
        assert!((cov.apply_power(&v, 2.0) - s2).amax() < 1e-10);
        let half = cov.power_matrix(0.5);
        assert!((&half * &half - cov.matrix()).amax() < 1e-10);
    }
}
