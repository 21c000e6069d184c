//! Linear baselines: closed-form ridge on flattened windows and the
//! decomposition-linear model.

mod dlinear;
mod ridge;

pub use dlinear::{moving_average_decompose, moving_average_matrix, DLinear, DLinearHeads, DEFAULT_MA_KERNEL};
pub use ridge::{fit_ridge, solve_normal, RidgeHeader, RidgeLinearModel, RidgeSolution, DEFAULT_LOCAL_BUDGET};
