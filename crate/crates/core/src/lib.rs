//! Missed-connection prediction: synthetic data, preprocessing, GMM
//! oversampling, gradient-boosted trees, TreeSHAP and evaluation.

pub mod baseline;
pub mod cost;
pub mod domain;
pub mod error;
pub mod gbdt;
pub mod gmm;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod shap;
pub mod synthgen;

pub use error::{Error, Result};
