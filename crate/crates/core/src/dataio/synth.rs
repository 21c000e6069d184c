//! Synthetic collections whose Bayes-optimal errors are known in closed form.
//!
//! Every generator returns the data together with two reference errors: the
//! MSE of the best predictor that may use the information the ablated design
//! choice provides (`informed`) and the MSE of the best predictor without it
//! (`blind`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::collection::SeriesCollection;
use crate::error::{Error, Result};

/// 2020-01-01 00:00:00 UTC.
pub const SYNTH_EPOCH: i64 = 1_577_836_800;
const HOUR: i64 = 3600;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleErrors {
    pub informed: f64,
    pub blind: f64,
}

impl OracleErrors {
    pub fn gap(&self) -> f64 {
        self.blind - self.informed
    }
}

/// Per-series AR coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoSpec {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Alternates `a, b, a, b, ...` across series, so the two values are
    /// exactly balanced for even `N`.
    TwoPoint {
        a: f64,
        b: f64,
    },
}

impl RhoSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = match *self {
            RhoSpec::Uniform { lo, hi } => (lo, hi),
            RhoSpec::TwoPoint { a, b } => (a.min(b), a.max(b)),
        };
        if !(lo > -1.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "AR coefficients must lie in (-1, 1), got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Ground truth kept alongside the data so the oracle predictors can be
/// replayed.
#[derive(Clone, Debug, PartialEq)]
pub enum Truth {
    LocalAr { rho: Vec<f64>, sigma: f64 },
    SpatialMixing { k: usize, mixing: bool, coupling: f64 },
    CalendarSeasonal { means: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub generator: &'static str,
    pub collection: SeriesCollection,
    pub oracle: OracleErrors,
    pub params: serde_json::Value,
    pub truth: Truth,
}

fn hourly(steps: usize) -> Vec<i64> {
    (0..steps as i64).map(|t| SYNTH_EPOCH + t * HOUR).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Per-series AR(1): `x[t+1] = rho_i * x[t] + sigma * e`, started from the
/// stationary distribution.
///
/// With a one-step window the informed error is `sigma^2`. The blind error is
/// that of the best pooled linear predictor `w x[t]`, with
/// `w = sum(rho_i v_i) / sum(v_i)` and `v_i = sigma^2 / (1 - rho_i^2)`. For a
/// symmetric two-point design `w = 0`, which is also the Bayes predictor.
pub fn synth_local_ar(n: usize, steps: usize, sigma: f64, rho: RhoSpec, seed: u64) -> Result<SyntheticDataset> {
    rho.validate()?;
    if n == 0 || steps < 2 {
        return Err(Error::InvalidArgument("need N >= 1 and T >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rhos: Vec<f64> = (0..n)
        .map(|i| match rho {
            RhoSpec::Uniform { lo, hi } if lo == hi => lo,
            RhoSpec::Uniform { lo, hi } => rng.random_range(lo..hi),
            RhoSpec::TwoPoint { a, b } => {
                if i % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        })
        .collect();
    let mut values = Vec::with_capacity(n * steps);
    for r in &rhos {
        let mut x = normal(&mut rng) * sigma / (1.0 - r * r).sqrt();
        for _ in 0..steps {
            values.push(x);
            x = r * x + sigma * normal(&mut rng);
        }
    }
    let var: Vec<f64> = rhos.iter().map(|r| sigma * sigma / (1.0 - r * r)).collect();
    let oracle = local_ar_oracle(&rhos, &var, sigma);
    let collection = SeriesCollection::new(n, steps, 1, values, hourly(steps), HOUR)?;
    Ok(SyntheticDataset {
        generator: "local_ar",
        collection,
        oracle,
        params: json!({ "n": n, "steps": steps, "sigma": sigma, "rho": rho, "seed": seed }),
        truth: Truth::LocalAr { rho: rhos, sigma },
    })
}

fn local_ar_oracle(rho: &[f64], var: &[f64], sigma: f64) -> OracleErrors {
    let total: f64 = var.iter().sum();
    let w = if total > 0.0 {
        rho.iter().zip(var).map(|(r, v)| r * v).sum::<f64>() / total
    } else {
        0.0
    };
    let excess = rho.iter().zip(var).map(|(r, v)| (r - w).powi(2) * v).sum::<f64>() / rho.len() as f64;
    OracleErrors {
        informed: sigma * sigma,
        blind: sigma * sigma + excess,
    }
}

/// Cross-series dependence with a known optimum.
///
/// Series form `N / k` blocks of `k` arranged in a cycle. Every series of
/// block `b + 1` at `t + 1` equals `c * mean(block b at t) + sigma * e` with
/// `c = 1 / sqrt(1 + sigma^2)`, which keeps every series at variance
/// `1/k + sigma^2`. A model seeing the other series reaches `sigma^2`. A model
/// seeing only its own last `W < N/k` values cannot do better than predicting
/// 0, i.e. `sigma^2 + 1/k`.
///
/// With `mixing = false` every series is its own driver (`x[t+1] = c x[t] +
/// sigma e`) and both errors equal `sigma^2`.
pub fn synth_spatial_mixing(
    n: usize,
    steps: usize,
    k: usize,
    sigma: f64,
    mixing: bool,
    seed: u64,
) -> Result<SyntheticDataset> {
    if k == 0 || steps < 2 {
        return Err(Error::InvalidArgument("need k >= 1 and T >= 2".into()));
    }
    if mixing && (!n.is_multiple_of(k) || n / k < 2) {
        return Err(Error::InvalidArgument(format!(
            "N = {n} must be a multiple of k = {k} with at least two blocks"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need N >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 1.0 / (1.0 + sigma * sigma).sqrt();
    // time-major while generating
    let mut x = vec![0.0; steps * n];
    if mixing {
        let blocks = n / k;
        let init_sd = ((1.0 + sigma * sigma) / k as f64).sqrt();
        let init_mean: Vec<f64> = (0..blocks).map(|_| init_sd * normal(&mut rng)).collect();
        // block means at t = -1 follow the stationary law
        for (i, xi) in x[..n].iter_mut().enumerate() {
            let driver = (i / k + blocks - 1) % blocks;
            *xi = c * init_mean[driver] + sigma * normal(&mut rng);
        }
        for t in 1..steps {
            let prev = &x[(t - 1) * n..t * n];
            let means: Vec<f64> = (0..blocks)
                .map(|b| prev[b * k..(b + 1) * k].iter().sum::<f64>() / k as f64)
                .collect();
            for i in 0..n {
                let driver = (i / k + blocks - 1) % blocks;
                x[t * n + i] = c * means[driver] + sigma * normal(&mut rng);
            }
        }
    } else {
        let sd = (1.0 + sigma * sigma).sqrt();
        for xi in &mut x[..n] {
            *xi = sd * normal(&mut rng);
        }
        for t in 1..steps {
            for i in 0..n {
                x[t * n + i] = c * x[(t - 1) * n + i] + sigma * normal(&mut rng);
            }
        }
    }
    let mut values = Vec::with_capacity(n * steps);
    for i in 0..n {
        values.extend((0..steps).map(|t| x[t * n + i]));
    }
    let s2 = sigma * sigma;
    let oracle = if mixing {
        OracleErrors {
            informed: s2,
            blind: s2 + 1.0 / k as f64,
        }
    } else {
        OracleErrors {
            informed: s2,
            blind: s2,
        }
    };
    let collection = SeriesCollection::new(n, steps, 1, values, hourly(steps), HOUR)?;
    Ok(SyntheticDataset {
        generator: "spatial_mixing",
        collection,
        oracle,
        params: json!({ "n": n, "steps": steps, "k": k, "sigma": sigma, "mixing": mixing, "seed": seed }),
        truth: Truth::SpatialMixing { k, mixing, coupling: c },
    })
}

/// Calendar-driven level: `x[t] = m(phase(t)) + sigma * e`, where the phase is
/// the hour of day split into `P` equal parts (`P` must divide 24).
///
/// Consecutive timestamps are `1..=24` hours apart, drawn uniformly, so the
/// next phase is independent of everything already observed and no window
/// length reveals it. The calendar encoding of the target timestamp does.
/// Informed error `sigma^2`; blind error `sigma^2 + Var(m)`.
pub fn synth_calendar_seasonal(
    n: usize,
    steps: usize,
    means: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    let p = means.len();
    if p == 0 || 24 % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "{p} phases do not divide the 24 hours of a day"
        )));
    }
    if n == 0 || steps < 2 {
        return Err(Error::InvalidArgument("need N >= 1 and T >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timestamps = Vec::with_capacity(steps);
    let mut ts = SYNTH_EPOCH;
    for _ in 0..steps {
        timestamps.push(ts);
        ts += HOUR * rng.random_range(1..=24);
    }
    let mut values = Vec::with_capacity(n * steps);
    for _ in 0..n {
        for ts in &timestamps {
            values.push(means[calendar_phase(*ts, p)] + sigma * normal(&mut rng));
        }
    }
    let m = means.iter().sum::<f64>() / p as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p as f64;
    let oracle = OracleErrors {
        informed: sigma * sigma,
        blind: sigma * sigma + var,
    };
    let collection = SeriesCollection::new(n, steps, 1, values, timestamps, HOUR)?;
    Ok(SyntheticDataset {
        generator: "calendar_seasonal",
        collection,
        oracle,
        params: json!({ "n": n, "steps": steps, "means": means, "sigma": sigma, "seed": seed }),
        truth: Truth::CalendarSeasonal { means: means.to_vec() },
    })
}

/// Phase index of a timestamp for `p` equal parts of the day.
pub fn calendar_phase(ts: i64, p: usize) -> usize {
    let hour = ts.rem_euclid(86_400) / HOUR;
    hour as usize * p / 24
}

impl SyntheticDataset {
    /// Empirical MSE of the two oracle predictors on the generated data, over
    /// every one-step-ahead target.
    pub fn monte_carlo(&self) -> OracleErrors {
        let c = &self.collection;
        let (n, steps) = (c.n_series(), c.steps());
        let mut informed = 0.0;
        let mut blind = 0.0;
        let mut count = 0usize;
        match &self.truth {
            Truth::LocalAr { rho, sigma } => {
                let var: Vec<f64> = rho.iter().map(|r| sigma * sigma / (1.0 - r * r)).collect();
                let total: f64 = var.iter().sum();
                let w = if total > 0.0 {
                    rho.iter().zip(&var).map(|(r, v)| r * v).sum::<f64>() / total
                } else {
                    0.0
                };
                for (i, r) in rho.iter().enumerate() {
                    for t in 1..steps {
                        let (prev, y) = (c.get(i, t - 1, 0), c.get(i, t, 0));
                        informed += (y - r * prev).powi(2);
                        blind += (y - w * prev).powi(2);
                        count += 1;
                    }
                }
            }
            Truth::SpatialMixing { k, mixing, coupling } => {
                let blocks = n / k;
                for t in 1..steps {
                    for i in 0..n {
                        let y = c.get(i, t, 0);
                        let pred = if *mixing {
                            let b = (i / k + blocks - 1) % blocks;
                            coupling * (b * k..(b + 1) * k).map(|j| c.get(j, t - 1, 0)).sum::<f64>() / *k as f64
                        } else {
                            coupling * c.get(i, t - 1, 0)
                        };
                        informed += (y - pred).powi(2);
                        let own = if *mixing { 0.0 } else { pred };
                        blind += (y - own).powi(2);
                        count += 1;
                    }
                }
            }
            Truth::CalendarSeasonal { means } => {
                let m = means.iter().sum::<f64>() / means.len() as f64;
                for i in 0..n {
                    for t in 1..steps {
                        let y = c.get(i, t, 0);
                        informed += (y - means[calendar_phase(c.timestamps[t], means.len())]).powi(2);
                        blind += (y - m).powi(2);
                        count += 1;
                    }
                }
            }
        }
        OracleErrors {
            informed: informed / count as f64,
            blind: blind / count as f64,
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        json!({
            "generator": self.generator,
            "params": self.params,
            "oracle": self.oracle,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json`; returns both paths.
    pub fn export(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = stem.with_extension("csv");
        let meta = stem.with_extension("json");
        self.collection.write_csv(&csv)?;
        fs::write(&meta, serde_json::to_string_pretty(&self.metadata())?)?;
        Ok((csv, meta))
    }
}
