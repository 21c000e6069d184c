//! Benchmark framework for multi-step forecasting of groups of time series.
//!
//! Models are assembled along four independent axes: how parameters are
//! shared across series (global, local, hybrid, or one joint multivariate
//! model), preprocessing and covariates, the temporal operator, and the
//! cross-series operator. The harness runs paired ablations that toggle one
//! axis at a time and emits a forecasting model card for every config.

pub mod assembly;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod linear;
pub mod modelcard;
pub mod preprocess;
pub mod spatial;
pub mod temporal;

pub use error::{Error, Result};
