//! Joint mean and covariance regression for multivariate responses with
//! categorical predictors.
//!
//! The covariance of the response at predictor vector `x` is modelled as a
//! baseline matrix plus a low-rank term quadratic in `x`. Parameters are
//! estimated by EM (maximum likelihood) or Gibbs sampling, models are
//! selected with AIC and a posterior-predictive heterogeneity check, and a
//! robustness study compares the fitted model with per-group estimates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod design;
pub mod error;
pub mod estimation;
pub mod model;
pub mod selection;
pub mod sensitivity;
pub mod stochastics;

pub use error::{Error, Result};
