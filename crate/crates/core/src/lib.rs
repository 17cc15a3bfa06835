//! Rank-one softmax and linear attention trained on Gaussian prompts.
//!
//! The attention parameter is a single vector `mu` with inverse temperature
//! `lambda`; trained on reconstruction risks it recovers principal components
//! of the token covariance. The crate provides the operators, closed-form and
//! Monte Carlo risks with analytic derivatives, landscape classification,
//! optimizers, the spiked-Wishart in-context variant, output-distribution
//! diagnostics and a config-driven experiment runner.

pub mod attention;
pub mod cli;
pub mod distrib;
pub mod error;
pub mod icl;
pub mod landscape;
pub(crate) mod mc;
pub mod optim;
pub mod risk;
pub mod spectra;

pub use attention::{infinite_attention, linear_attention, softmax_attention, AttnOutput, AttnParam};
pub use error::{Error, Result};
pub use spectra::{build_experiment_covariance, sample_prompt, CovarianceModel, Prompt, RngStream};
