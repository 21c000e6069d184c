//! Ingestion, splitting, scaling, calendar covariates, windowing and
//! synthetic generators.

mod calendar;
mod collection;
mod scaler;
mod split;
pub mod synth;
mod windows;

pub use calendar::{encode_calendar, CALENDAR_CHANNELS};
pub use collection::{infer_frequency, load_csv, parse_timestamp, SeriesCollection};
pub use scaler::{Scaler, SCALER_EPS};
pub use split::{split, SplitRanges, SplitSpec};
pub use synth::{OracleErrors, RhoSpec, SyntheticDataset};
pub use windows::{
    make_windows, stack_series_as_channels, unstack_channels, window_starts, Block, CovariateSet, PreparedData,
    WindowBatch, WindowIndex,
};

/// Lookback used by the short-window experiments.
pub const SHORT_WINDOW: usize = 96;
/// Lookback used by the long-window experiments.
pub const LONG_WINDOW: usize = 336;

/// Long-window lookback for a dataset. Solar keeps the short window.
pub fn long_window(dataset: &str) -> usize {
    if dataset.to_ascii_lowercase().contains("solar") {
        SHORT_WINDOW
    } else {
        LONG_WINDOW
    }
}
