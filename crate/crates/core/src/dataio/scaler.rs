use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::collection::SeriesCollection;

pub const SCALER_EPS: f64 = 1e-8;

/// Per-series, per-channel z-score statistics estimated on one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    /// `[N][d_x]`, flattened.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub channels: usize,
}

impl Scaler {
    /// Fits on `fit_range` only, skipping masked entries. Series with no
    /// observed value in the range get mean 0 and std 1.
    pub fn fit(c: &SeriesCollection, fit_range: Range<usize>) -> Self {
        let (n, d) = (c.n_series(), c.channels());
        let mut mean = vec![0.0; n * d];
        let mut std = vec![1.0; n * d];
        for i in 0..n {
            for ch in 0..d {
                let obs: Vec<f64> = fit_range
                    .clone()
                    .filter(|t| c.observed(i, *t, ch))
                    .map(|t| c.get(i, t, ch))
                    .collect();
                if obs.is_empty() {
                    continue;
                }
                let m = obs.iter().sum::<f64>() / obs.len() as f64;
                let var = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64;
                mean[i * d + ch] = m;
                std[i * d + ch] = var.sqrt().max(SCALER_EPS);
            }
        }
        Self { mean, std, channels: d }
    }

    pub fn identity(n_series: usize, channels: usize) -> Self {
        Self {
            mean: vec![0.0; n_series * channels],
            std: vec![1.0; n_series * channels],
            channels,
        }
    }

    #[inline]
    pub fn apply_value(&self, series: usize, channel: usize, v: f64) -> f64 {
        let k = series * self.channels + channel;
        (v - self.mean[k]) / self.std[k]
    }

    #[inline]
    pub fn invert_value(&self, series: usize, channel: usize, v: f64) -> f64 {
        let k = series * self.channels + channel;
        v * self.std[k] + self.mean[k]
    }

    /// Scaled copy of `c`; masked entries stay `NaN`.
    pub fn apply(&self, c: &SeriesCollection) -> SeriesCollection {
        self.map(c, |s, ch, v| self.apply_value(s, ch, v))
    }

    pub fn invert(&self, c: &SeriesCollection) -> SeriesCollection {
        self.map(c, |s, ch, v| self.invert_value(s, ch, v))
    }

    fn map(&self, c: &SeriesCollection, f: impl Fn(usize, usize, f64) -> f64) -> SeriesCollection {
        let mut out = c.clone();
        let (steps, d) = (c.steps(), c.channels());
        for (k, v) in out.values_mut().iter_mut().enumerate() {
            if v.is_finite() {
                let series = k / (steps * d);
                let ch = k % d;
                *v = f(series, ch, *v);
            }
        }
        out
    }
}
