use std::f64::consts::TAU;

use chrono::{DateTime, Datelike, Timelike};

use crate::autodiff::Tensor;

pub const CALENDAR_CHANNELS: usize = 6;

/// Six sin/cos channels per step: hour of day, day of week, day of year.
/// Hour of day includes minutes and seconds, so sub-hourly data gets a
/// smooth phase.
pub fn encode_calendar(timestamps: &[i64]) -> Tensor {
    let mut data = Vec::with_capacity(timestamps.len() * CALENDAR_CHANNELS);
    for ts in timestamps {
        let dt = DateTime::from_timestamp(*ts, 0).unwrap_or_default();
        let seconds = dt.num_seconds_from_midnight() as f64;
        let hour = TAU * seconds / 86_400.0;
        let dow = TAU * dt.weekday().num_days_from_monday() as f64 / 7.0;
        let days_in_year = if dt.date_naive().leap_year() { 366.0 } else { 365.0 };
        let doy = TAU * dt.ordinal0() as f64 / days_in_year;
        data.extend_from_slice(&[hour.sin(), hour.cos(), dow.sin(), dow.cos(), doy.sin(), doy.cos()]);
    }
    Tensor::new(vec![timestamps.len(), CALENDAR_CHANNELS], data).expect("shape matches")
}
