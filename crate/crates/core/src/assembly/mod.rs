//! Declarative model configuration and the composed forecasting model.

mod config;
mod model;

pub use config::{Decoder, Family, Mode, ModelConfig, DEFAULT_PATCH_LEN, DEFAULT_PATCH_STRIDE, DEFAULT_RIDGE_LAMBDA};
pub use model::{build, Batching, Body, ForecastModel, Pipeline};
