//! Rank-one attention operators.
//!
//! Query positions are 1-based: `query_index = 1` is the first token. The
//! query token always takes part in its own sum.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::spectra::{CovarianceModel, Prompt};

/// Attention vector `mu` and inverse temperature `lambda >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParam {
    pub mu: DVector<f64>,
    pub lambda: f64,
}

impl AttnParam {
    pub fn new(mu: DVector<f64>, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if mu.is_empty() {
            return Err(Error::InvalidArgument("mu must have dimension >= 1".into()));
        }
        Ok(Self { mu, lambda })
    }

    pub fn from_slice(mu: &[f64], lambda: f64) -> Result<Self> {
        Self::new(DVector::from_column_slice(mu), lambda)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn with_mu(&self, mu: DVector<f64>) -> Self {
        Self { mu, lambda: self.lambda }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput {
    pub value: DVector<f64>,
    pub query_index: usize,
}

fn check_query(prompt: &Prompt, param: &AttnParam, query_index: usize) -> Result<()> {
    check_dim(prompt.dim(), param.dim())?;
    if query_index == 0 || query_index > prompt.len() {
        return Err(Error::QueryOutOfRange { index: query_index, len: prompt.len() });
    }
    Ok(())
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Softmax weights `w_k` of the query at `query_index` over all tokens.
pub fn softmax_weights(prompt: &Prompt, param: &AttnParam, query_index: usize) -> Result<Vec<f64>> {
    check_query(prompt, param, query_index)?;
    let mu = param.mu.as_slice();
    let q = dot(prompt.token(query_index - 1), mu);
    let logits: Vec<f64> = (0..prompt.len()).map(|k| param.lambda * q * dot(prompt.token(k), mu)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
    Ok(w)
}

/// `sum_k softmax_k(lambda <X_l, mu> <X_k, mu>) X_k`.
pub fn softmax_attention(prompt: &Prompt, param: &AttnParam, query_index: usize) -> Result<AttnOutput> {
    let w = softmax_weights(prompt, param, query_index)?;
    let mut value = DVector::zeros(prompt.dim());
    for (k, wk) in w.iter().enumerate() {
        for (v, x) in value.iter_mut().zip(prompt.token(k)) {
            *v += wk * x;
        }
    }
    Ok(AttnOutput { value, query_index })
}

/// `(lambda / L) sum_k <X_l, mu> <X_k, mu> X_k`.
pub fn linear_attention(prompt: &Prompt, param: &AttnParam, query_index: usize) -> Result<AttnOutput> {
    check_query(prompt, param, query_index)?;
    let mu = param.mu.as_slice();
    let q = dot(prompt.token(query_index - 1), mu);
    let scale = param.lambda * q / prompt.len() as f64;
    let mut value = DVector::zeros(prompt.dim());
    for k in 0..prompt.len() {
        let x = prompt.token(k);
        let c = scale * dot(x, mu);
        for (v, xi) in value.iter_mut().zip(x) {
            *v += c * xi;
        }
    }
    Ok(AttnOutput { value, query_index })
}

/// Infinite-prompt limit `lambda Sigma mu (mu^T x)`.
pub fn infinite_attention(x: &DVector<f64>, param: &AttnParam, cov: &CovarianceModel) -> Result<DVector<f64>> {
    check_dim(cov.dim(), param.dim())?;
    check_dim(cov.dim(), x.len())?;
    Ok(cov.apply(&param.mu) * (param.lambda * param.mu.dot(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{build_experiment_covariance, sample_prompt, RngStream};
    use proptest::prelude::*;

    /// Straight-line evaluation with Neumaier-compensated sums and no
    /// max-subtraction; `include_query = false` drops the k = l term.
    fn oracle_softmax(tokens: &[Vec<f64>], mu: &[f64], lambda: f64, l: usize, include_query: bool) -> Vec<f64> {
        let proj: Vec<f64> = tokens.iter().map(|t| t.iter().zip(mu).map(|(a, b)| a * b).sum()).collect();
        let mut num = vec![Neumaier::default(); mu.len()];
        let mut den = Neumaier::default();
        for (k, t) in tokens.iter().enumerate() {
            if !include_query && k == l {
                continue;
            }
            let e = (lambda * proj[l] * proj[k]).exp();
            den.add(e);
            for (n, x) in num.iter_mut().zip(t) {
                n.add(e * x);
            }
        }
        num.iter().map(|n| n.value() / den.value()).collect()
    }

    #[derive(Default, Clone, Copy)]
    struct Neumaier {
        sum: f64,
        comp: f64,
    }

    impl Neumaier {
        fn add(&mut self, x: f64) {
            let t = self.sum + x;
            if self.sum.abs() >= x.abs() {
                self.comp += (self.sum - t) + x;
            } else {
                self.comp += (x - t) + self.sum;
            }
            self.sum = t;
        }
        fn value(&self) -> f64 {
            self.sum + self.comp
        }
    }

    fn tokens_of(p: &Prompt) -> Vec<Vec<f64>> {
        (0..p.len()).map(|k| p.token(k).to_vec()).collect()
    }

    fn setup(d: usize, len: usize, seed: u64) -> (CovarianceModel, Prompt) {
        let cov = build_experiment_covariance(d, RngStream::new(seed, 0)).unwrap();
        let prompt = sample_prompt(&cov, len, RngStream::new(seed, 1)).unwrap();
        (cov, prompt)
    }

    #[test]
    fn zero_mu_gives_prompt_mean() {
        let (_, p) = setup(3, 7, 1);
        let param = AttnParam::new(DVector::zeros(3), 0.7).unwrap();
        let out = softmax_attention(&p, &param, 2).unwrap();
        for i in 0..3 {
            let mean: f64 = (0..7).map(|k| p.token(k)[i]).sum::<f64>() / 7.0;
            assert!((out.value[i] - mean).abs() < 1e-14);
        }
        assert_eq!(linear_attention(&p, &param, 1).unwrap().value, DVector::zeros(3));
    }

    #[test]
    fn single_token() {
        let (_, p) = setup(3, 1, 2);
        let param = AttnParam::from_slice(&[0.4, -1.0, 2.0], 0.3).unwrap();
        let out = softmax_attention(&p, &param, 1).unwrap();
        assert_eq!(out.value.as_slice(), p.token(0));
        let q = dot(p.token(0), param.mu.as_slice());
        let lin = linear_attention(&p, &param, 1).unwrap();
        for i in 0..3 {
            assert!((lin.value[i] - 0.3 * q * q * p.token(0)[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_matches_oracle() {
        for seed in 0..5 {
            let (_, p) = setup(3, 5, 10 + seed);
            let param = AttnParam::from_slice(&[0.3, -0.2, 0.5], 0.4).unwrap();
            let toks = tokens_of(&p);
            for l in 1..=5 {
                let out = softmax_attention(&p, &param, l).unwrap();
                let want = oracle_softmax(&toks, param.mu.as_slice(), 0.4, l - 1, true);
                for i in 0..3 {
                    assert!((out.value[i] - want[i]).abs() < 1e-13 * (1.0 + want[i].abs()));
                }
            }
        }
    }

    #[test]
    fn query_inclusion_matters() {
        let (_, p) = setup(3, 5, 3);
        let param = AttnParam::from_slice(&[1.0, 0.5, -0.5], 0.5).unwrap();
        let toks = tokens_of(&p);
        let with = oracle_softmax(&toks, param.mu.as_slice(), 0.5, 0, true);
        let without = oracle_softmax(&toks, param.mu.as_slice(), 0.5, 0, false);
        let out = softmax_attention(&p, &param, 1).unwrap();
        let gap_with: f64 = (0..3).map(|i| (out.value[i] - with[i]).abs()).sum();
        let gap_without: f64 = (0..3).map(|i| (out.value[i] - without[i]).abs()).sum();
        assert!(gap_with < 1e-12 && gap_without > 1e-6);
    }

    #[test]
    fn linear_matches_oracle() {
        let (_, p) = setup(3, 5, 4);
        let mu = [0.3, -0.2, 0.5];
        let param = AttnParam::from_slice(&mu, 0.4).unwrap();
        let toks = tokens_of(&p);
        let proj: Vec<f64> = toks.iter().map(|t| t.iter().zip(&mu).map(|(a, b)| a * b).sum()).collect();
        let out = linear_attention(&p, &param, 3).unwrap();
        for i in 0..3 {
            let mut want = 0.0;
            for k in 0..5 {
                want += 0.4 / 5.0 * proj[2] * proj[k] * toks[k][i];
            }
            assert!((out.value[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn infinite_examples() {
        let cov = CovarianceModel::diagonal(&[2.0, 1.0]).unwrap();
        let param = AttnParam::from_slice(&[1.0, 0.0], 1.0).unwrap();
        let out = infinite_attention(&DVector::from_column_slice(&[3.0, 5.0]), &param, &cov).unwrap();
        assert_eq!(out.as_slice(), &[6.0, 0.0]);
        let perp = infinite_attention(&DVector::from_column_slice(&[0.0, 5.0]), &param, &cov).unwrap();
        assert_eq!(perp, DVector::zeros(2));
    }

    #[test]
    fn query_out_of_range() {
        let (_, p) = setup(2, 4, 5);
        let param = AttnParam::from_slice(&[1.0, 0.0], 1.0).unwrap();
        assert!(matches!(softmax_attention(&p, &param, 0), Err(Error::QueryOutOfRange { .. })));
        assert!(matches!(linear_attention(&p, &param, 5), Err(Error::QueryOutOfRange { .. })));
        assert!(AttnParam::from_slice(&[1.0], -1.0).is_err());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let (_, p) = setup(2, 6, 6);
        let param = AttnParam::from_slice(&[30.0, -30.0], 5.0).unwrap();
        let out = softmax_attention(&p, &param, 1).unwrap();
        assert!(out.value.iter().all(|v| v.is_finite()));
    }

    /// Mean of `||T_L(X)_1 - T_inf(X_1)||^2` over `n` prompts.
    fn consistency_error(lin: bool, len: usize, n: u64) -> f64 {
        let cov = CovarianceModel::diagonal(&[2.0, 1.5, 1.0, 0.5]).unwrap();
        let param = AttnParam::from_slice(&[0.5, 0.3, -0.2, 0.1], 0.1).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let p = sample_prompt(&cov, len, RngStream::new(77, i)).unwrap();
            let out = if lin { linear_attention(&p, &param, 1) } else { softmax_attention(&p, &param, 1) };
            let inf = infinite_attention(&p.token_vector(0), &param, &cov).unwrap();
            total += (out.unwrap().value - inf).norm_squared();
        }
        total / n as f64
    }

    #[test]
    fn large_prompt_consistency() {
        for lin in [false, true] {
            let errs: Vec<f64> = [10, 100, 1000, 10000].iter().map(|&l| consistency_error(lin, l, 400)).collect();
            assert!(errs.windows(2).all(|w| w[1] < w[0]), "lin={lin}: {errs:?}");
        }
    }

    proptest! {
        #[test]
        fn weights_on_simplex(seed in 0u64..1000, lambda in 0.0f64..3.0, m0 in -3.0f64..3.0, m1 in -3.0f64..3.0) {
            let (_, p) = setup(2, 8, seed);
            let param = AttnParam::from_slice(&[m0, m1], lambda).unwrap();
            let w = softmax_weights(&p, &param, 1 + (seed as usize) % 8).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sign_invariance(seed in 0u64..1000, m0 in -2.0f64..2.0, m1 in -2.0f64..2.0, m2 in -2.0f64..2.0) {
            let (_, p) = setup(3, 6, seed);
            let param = AttnParam::from_slice(&[m0, m1, m2], 0.5).unwrap();
            let neg = param.with_mu(-param.mu.clone());
            let a = softmax_attention(&p, &param, 2).unwrap().value;
            let b = softmax_attention(&p, &neg, 2).unwrap().value;
            prop_assert!((a - b).amax() < 1e-12);
        }
    }
}
