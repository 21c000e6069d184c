use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{Metrics, Stat};
use super::train::{evaluate_block, train_with, History, TrainSpec};
use crate::assembly::{build, Batching, Mode, ModelConfig};
use crate::dataio::{Block, CovariateSet, PreparedData, SeriesCollection};
use crate::error::{Error, Result};
use crate::spatial::SpatialKind;

/// Embedding size used when the D1 ablation adds local parameters to a
/// config that has none.
pub const DEFAULT_ABLATION_D_EMB: usize = 16;

pub const DEFAULT_HIDDEN_GRID: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_unscaled: Option<Metrics>,
    pub best_val_mse: f64,
    pub epochs: usize,
    pub batch_time_ms: f64,
}

/// Aggregated outcome of one config over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub dataset: String,
    pub fingerprint: String,
    pub config: ModelConfig,
    pub seeds: Vec<u64>,
    pub mse: Stat,
    pub mae: Stat,
    /// Means over seeds.
    pub mse_per_horizon: Vec<f64>,
    pub mae_per_horizon: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_unscaled: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_unscaled: Option<Stat>,
    pub batch_time_ms: f64,
    pub param_count: usize,
    pub per_seed: Vec<SeedResult>,
}

impl RunResult {
    pub fn from_seeds(config: &ModelConfig, dataset: &str, param_count: usize, per_seed: Vec<SeedResult>) -> Self {
        let pick = |f: &dyn Fn(&SeedResult) -> f64| -> Vec<f64> { per_seed.iter().map(f).collect() };
        let horizon = per_seed.first().map_or(0, |s| s.test.mse_per_horizon.len());
        let mean_at = |f: &dyn Fn(&SeedResult) -> &[f64], h: usize| -> f64 {
            per_seed.iter().map(|s| f(s)[h]).sum::<f64>() / per_seed.len() as f64
        };
        let unscaled = per_seed.iter().all(|s| s.test_unscaled.is_some()) && !per_seed.is_empty();
        let mut base = config.clone();
        base.seed = 0;
        Self {
            label: config.label(),
            dataset: dataset.to_string(),
            fingerprint: base.fingerprint(),
            config: base,
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            mse: Stat::of(&pick(&|s| s.test.mse)),
            mae: Stat::of(&pick(&|s| s.test.mae)),
            mse_per_horizon: (0..horizon).map(|h| mean_at(&|s| &s.test.mse_per_horizon, h)).collect(),
            mae_per_horizon: (0..horizon).map(|h| mean_at(&|s| &s.test.mae_per_horizon, h)).collect(),
            mse_unscaled: unscaled.then(|| Stat::of(&pick(&|s| s.test_unscaled.as_ref().unwrap().mse))),
            mae_unscaled: unscaled.then(|| Stat::of(&pick(&|s| s.test_unscaled.as_ref().unwrap().mae))),
            batch_time_ms: pick(&|s| s.batch_time_ms).iter().sum::<f64>() / per_seed.len().max(1) as f64,
            param_count,
            per_seed,
        }
    }
}

/// A result plus the time it was logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp: String,
    #[serde(flatten)]
    pub result: RunResult,
}

/// Append-only JSON-lines result log with a single writer.
#[derive(Debug)]
pub struct ResultLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl ResultLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, result: &RunResult) -> Result<()> {
        let record = LogRecord {
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            result: result.clone(),
        };
        let line = serde_json::to_string(&record)?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn prepare(config: &ModelConfig, raw: &SeriesCollection, spec: &TrainSpec) -> Result<PreparedData> {
    if raw.n_series() != config.n_series || raw.channels() != config.channels {
        return Err(Error::Config(format!(
            "config expects {} series with {} channels, data has {} with {}",
            config.n_series,
            config.channels,
            raw.n_series(),
            raw.channels()
        )));
    }
    PreparedData::new(
        raw,
        &spec.split,
        config.scaler,
        config.covariates,
        config.window,
        config.horizon,
    )
}

/// Trains and tests one seed. `batching` overrides the model's own choice.
pub fn run_seed(
    config: &ModelConfig,
    data: &PreparedData,
    spec: &TrainSpec,
    seed: u64,
    batching: Option<Batching>,
) -> Result<(SeedResult, History, usize)> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut model = build(&cfg)?;
    let batching = batching.unwrap_or(model.batching());
    let history = train_with(&mut model, data, spec, seed, batching)?;
    let (test, raw) = evaluate_block(
        &model,
        data,
        Block::Test,
        spec.eval_stride,
        spec.batch_size,
        spec.unscaled,
    )?;
    Ok((
        SeedResult {
            seed,
            test,
            test_unscaled: raw,
            best_val_mse: history.best_val_mse,
            epochs: history.epochs.len(),
            batch_time_ms: history.batch_time_ms,
        },
        history,
        model.param_count(),
    ))
}

fn run_prepared(
    config: &ModelConfig,
    dataset: &str,
    data: &PreparedData,
    spec: &TrainSpec,
    batching: Option<Batching>,
) -> Result<RunResult> {
    spec.validate()?;
    config.validate()?;
    let runs: Vec<(SeedResult, History, usize)> = spec
        .seeds
        .par_iter()
        .map(|seed| run_seed(config, data, spec, *seed, batching))
        .collect::<Result<_>>()?;
    let params = runs[0].2;
    Ok(RunResult::from_seeds(
        config,
        dataset,
        params,
        runs.into_iter().map(|r| r.0).collect(),
    ))
}

/// Every seed trained independently (in parallel), then aggregated. The
/// result is appended to `log` when given.
pub fn run_experiment(
    config: &ModelConfig,
    dataset: &str,
    raw: &SeriesCollection,
    spec: &TrainSpec,
    log: Option<&ResultLog>,
) -> Result<RunResult> {
    let data = prepare(config, raw, spec)?;
    let result = run_prepared(config, dataset, &data, spec, None)?;
    if let Some(log) = log {
        log.append(&result)?;
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    D1LocalParams,
    D2Covariates,
    D4Spatial,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [
        AblationAxis::D1LocalParams,
        AblationAxis::D2Covariates,
        AblationAxis::D4Spatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::D1LocalParams => "d1-local-params",
            AblationAxis::D2Covariates => "d2-covariates",
            AblationAxis::D4Spatial => "d4-spatial",
        }
    }

    /// Config fields the two arms may differ in. The D1 pair counts as one
    /// setting because hybrid mode and a nonzero embedding imply each other.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            AblationAxis::D1LocalParams => &["mode", "d_emb"],
            AblationAxis::D2Covariates => &["covariates"],
            AblationAxis::D4Spatial => &["spatial", "spatial_heads"],
        }
    }

    /// The (with, without) arms derived from `config`.
    pub fn arms(self, config: &ModelConfig) -> Result<(ModelConfig, ModelConfig)> {
        let (mut with, mut without) = (config.clone(), config.clone());
        match self {
            AblationAxis::D1LocalParams => {
                if !matches!(config.mode, Mode::Global | Mode::Hybrid) {
                    return Err(Error::Config(format!(
                        "the local-parameter ablation needs a global or hybrid config, not {}",
                        config.mode.name()
                    )));
                }
                with.mode = Mode::Hybrid;
                if with.d_emb == 0 {
                    with.d_emb = DEFAULT_ABLATION_D_EMB;
                }
                without.mode = Mode::Global;
                without.d_emb = 0;
            }
            AblationAxis::D2Covariates => {
                with.covariates = CovariateSet::Calendar;
                without.covariates = CovariateSet::None;
            }
            AblationAxis::D4Spatial => {
                if with.spatial == SpatialKind::None {
                    with.spatial = SpatialKind::Attention;
                }
                without.spatial = SpatialKind::None;
                without.spatial_heads = None;
            }
        }
        with.validate()?;
        without.validate()?;
        Ok((with, without))
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == key || a.name().split('-').next() == Some(key.as_str()))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation axis `{s}` (expected d1-local-params, d2-covariates or d4-spatial)"
                ))
            })
    }
}

/// Top-level config fields whose values differ.
pub fn differing_fields(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["<unserializable>".into()];
    };
    let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| x.get(*k) != y.get(*k)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub axis: AblationAxis,
    pub with: RunResult,
    pub without: RunResult,
    pub differing: Vec<String>,
}

impl Ablation {
    /// `(with - without) / without` on mean test MSE.
    pub fn relative_delta(&self) -> f64 {
        (self.with.mse.mean - self.without.mse.mean) / self.without.mse.mean
    }
}

/// Paired runs that share seeds, split, window order and every config field
/// outside the axis.
pub fn ablate(
    config: &ModelConfig,
    axis: AblationAxis,
    dataset: &str,
    raw: &SeriesCollection,
    spec: &TrainSpec,
    log: Option<&ResultLog>,
) -> Result<Ablation> {
    let (with, without) = axis.arms(config)?;
    let differing = differing_fields(&with, &without);
    if differing.is_empty() || differing.iter().any(|f| !axis.fields().contains(&f.as_str())) {
        return Err(Error::Config(format!("ablation arms differ in {differing:?}")));
    }
    let (bw, bo) = (build(&with)?.batching(), build(&without)?.batching());
    // the stricter batching keeps both arms on the same window order
    let batching = if bw == Batching::Grouped || bo == Batching::Grouped {
        Batching::Grouped
    } else {
        bw
    };
    let dw = prepare(&with, raw, spec)?;
    let do_ = prepare(&without, raw, spec)?;
    let mut with = run_prepared(&with, dataset, &dw, spec, Some(batching))?;
    let mut without = run_prepared(&without, dataset, &do_, spec, Some(batching))?;
    // a user-chosen name would otherwise label both arms the same
    if with.label == without.label {
        with.label = format!("{} (with {})", with.label, axis.name());
        without.label = format!("{} (without {})", without.label, axis.name());
    }
    if let Some(log) = log {
        log.append(&with)?;
        log.append(&without)?;
    }
    Ok(Ablation {
        axis,
        with,
        without,
        differing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: ModelConfig,
    /// `(hidden, mean best val MSE)` in grid order.
    pub scores: Vec<(usize, f64)>,
}

/// Lowest score wins; ties go to the smaller hidden size.
pub fn pick_best(scores: &[(usize, f64)]) -> Option<usize> {
    scores
        .iter()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(h, _)| *h)
}

/// Trains one config per hidden size and keeps the best by val MSE.
pub fn sweep_hidden(
    config: &ModelConfig,
    raw: &SeriesCollection,
    spec: &TrainSpec,
    grid: &[usize],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hidden-size grid".into()));
    }
    let data = prepare(config, raw, spec)?;
    let mut scores = Vec::with_capacity(grid.len());
    for &hidden in grid {
        let mut cfg = config.clone();
        cfg.hidden = hidden;
        cfg.validate()?;
        let vals: Vec<f64> = spec
            .seeds
            .par_iter()
            .map(|seed| run_seed(&cfg, &data, spec, *seed, None).map(|r| r.0.best_val_mse))
            .collect::<Result<_>>()?;
        scores.push((hidden, Stat::of(&vals).mean));
    }
    let hidden = pick_best(&scores).ok_or_else(|| Error::InvalidArgument("every sweep point diverged".into()))?;
    let mut best = config.clone();
    best.hidden = hidden;
    Ok(SweepResult { best, scores })
}
