//! Counterfactual active learning toolkit.
//!
//! Measures the average unary quantitative input influence (auQII) of binary
//! classifiers, checks the covariate-shift bounds that relate on-distribution
//! agreement to influence agreement, and runs the oracle-assisted retraining
//! loop that pushes a model's influences toward those of a labeler.
//!
//! Module map:
//!
//! - [`data`]: schemas, datasets, CSV ingestion, counterfactual sampling, bias predicates
//! - [`models`]: logistic regression, CART trees and random forests
//! - [`influence`]: exact and Monte-Carlo auQII, counterfactual disagreement
//! - [`theory`]: influence-difference bound and unconstrained-influence witnesses
//! - [`cal`]: the counterfactual active learning loop and its oracles
//! - [`experiments`]: biased-model experiments, convergence curves, setting comparison
//! - [`synth`]: synthetic tabular generators shaped like common audit datasets

pub mod cal;
pub mod data;
pub mod error;
pub mod experiments;
pub mod influence;
pub mod models;
pub mod seed;
pub mod synth;
pub mod theory;

pub use error::{CalError, Result};
