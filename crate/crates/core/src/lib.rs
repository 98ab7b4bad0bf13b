//! Digital risk scores from multiplex immunofluorescence whole-slide data.
//!
//! The pipeline runs from registered per-nucleus marker positivity to
//! per-phenotype density features, boosted Cox survival trees, ensembled risk
//! stratification, survival statistics and exact TreeSHAP attributions.

pub mod data;
pub mod error;
pub mod gbm;
pub mod metrics;
pub mod phenotype;
pub mod protocol;
pub mod registration;
pub mod shap;
pub mod stats;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
