use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataio::{Scaler, WindowBatch};
use crate::error::{shape_err, Error, Result};

/// Errors averaged over every observed target element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Index `h` averages step `h + 1` of the horizon.
    pub mse_per_horizon: Vec<f64>,
    pub mae_per_horizon: Vec<f64>,
    /// Observed target elements counted.
    pub count: usize,
}

/// Streaming sums of squared and absolute errors per horizon step.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    se: Vec<f64>,
    ae: Vec<f64>,
    count: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        Self {
            se: vec![0.0; horizon],
            ae: vec![0.0; horizon],
            count: vec![0; horizon],
        }
    }

    /// Adds `[B, H, d]` predictions against targets; masked elements are
    /// skipped.
    pub fn add(&mut self, pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<()> {
        if pred.shape() != target.shape() || mask.len() != target.numel() || pred.rank() != 3 {
            return Err(shape_err(
                "metrics",
                format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
            ));
        }
        let (h, d) = (pred.shape()[1], pred.shape()[2]);
        if h != self.se.len() {
            return Err(shape_err("metrics", format!("horizon {h} vs {}", self.se.len())));
        }
        for (k, ((p, y), m)) in pred.data().iter().zip(target.data()).zip(mask).enumerate() {
            if !*m {
                continue;
            }
            let step = (k / d) % h;
            let e = p - y;
            self.se[step] += e * e;
            self.ae[step] += e.abs();
            self.count[step] += 1;
        }
        Ok(())
    }

    /// Adds a batch after mapping predictions and targets back to raw units.
    /// Joint batches carry series `i` in channels `i*d .. (i+1)*d`.
    pub fn add_unscaled(&mut self, pred: &Tensor, batch: &WindowBatch, scaler: &Scaler, joint: bool) -> Result<()> {
        let (h, dd) = (pred.shape()[1], pred.shape()[2]);
        let d = scaler.channels;
        let invert = |t: &Tensor| -> Tensor {
            let mut out = t.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let row = k / (h * dd);
                let c = k % dd;
                let (series, channel) = if joint { (c / d, c % d) } else { (batch.series[row], c) };
                *v = scaler.invert_value(series, channel, *v);
            }
            out
        };
        self.add(&invert(pred), &invert(&batch.target), &batch.target_mask)
    }

    pub fn finish(&self) -> Result<Metrics> {
        let total: usize = self.count.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no observed targets to evaluate".into()));
        }
        let ratio = |num: &[f64]| -> Vec<f64> {
            num.iter()
                .zip(&self.count)
                .map(|(s, c)| if *c == 0 { f64::NAN } else { s / *c as f64 })
                .collect()
        };
        Ok(Metrics {
            mse: self.se.iter().sum::<f64>() / total as f64,
            mae: self.ae.iter().sum::<f64>() / total as f64,
            mse_per_horizon: ratio(&self.se),
            mae_per_horizon: ratio(&self.ae),
            count: total,
        })
    }
}

/// Metrics for a single `[B, H, d]` prediction.
pub fn metrics(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<Metrics> {
    let h = target.shape().get(1).copied().unwrap_or(0);
    let mut acc = MetricAccumulator::new(h);
    acc.add(pred, target, mask)?;
    acc.finish()
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Population statistics (divides by `n`, not `n - 1`).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for Stat {
    /// `0.136±.000`: three decimals, leading zero of the spread dropped.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let spread = format!("{:.3}", self.std);
        let spread = spread.strip_prefix('0').unwrap_or(&spread);
        write!(f, "{:.3}±{spread}", self.mean)
    }
}
