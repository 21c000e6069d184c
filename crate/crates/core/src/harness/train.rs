use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{MetricAccumulator, Metrics};
use crate::assembly::{Batching, Body, ForecastModel};
use crate::autodiff::{Graph, Tensor, Var};
use crate::dataio::{Block, PreparedData, SplitSpec, WindowBatch, WindowIndex};
use crate::error::{Error, Result};
use crate::linear::DEFAULT_LOCAL_BUDGET;

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_MAX_EPOCHS: usize = 50;
pub const DEFAULT_PATIENCE: usize = 5;

/// Optimization and evaluation settings shared by every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub max_epochs: usize,
    /// Rows per batch; grouped batches round down to whole groups of `N`.
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a val MSE improvement before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub split: SplitSpec,
    /// Stride between training windows.
    pub train_stride: usize,
    /// Stride between val and test windows.
    pub eval_stride: usize,
    /// Caps the batches drawn per epoch.
    pub max_batches_per_epoch: Option<usize>,
    /// Local ridge weight budget.
    pub ridge_budget: usize,
    /// Also report metrics in raw units.
    pub unscaled: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            max_epochs: DEFAULT_MAX_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            patience: DEFAULT_PATIENCE,
            seeds: DEFAULT_SEEDS.to_vec(),
            split: SplitSpec::default(),
            train_stride: 1,
            eval_stride: 1,
            max_batches_per_epoch: None,
            ridge_budget: DEFAULT_LOCAL_BUDGET,
            unscaled: false,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("batch size and strides must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        self.split.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    /// Mean wall-clock time of one optimization step.
    pub batch_time_ms: f64,
}

/// One batch worth of windows, materialized on demand.
#[derive(Clone, Debug)]
pub enum Plan {
    Rows(Vec<WindowIndex>),
    Grouped(Vec<usize>),
    Joint(Vec<usize>),
}

impl Plan {
    pub fn materialize(&self, data: &PreparedData) -> WindowBatch {
        match self {
            Plan::Rows(idx) => data.batch(idx),
            Plan::Grouped(starts) => data.grouped_batch(starts),
            Plan::Joint(starts) => data.joint_batch(starts),
        }
    }
}

/// Splits a block into batches. With an RNG the order is shuffled.
pub fn plan_batches(
    data: &PreparedData,
    block: Block,
    batching: Batching,
    stride: usize,
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Plan>> {
    let n = data.n_series();
    Ok(match batching {
        Batching::Independent => {
            let mut idx = data.windows(block, stride)?;
            if let Some(rng) = rng {
                idx.shuffle(rng);
            }
            idx.chunks(batch_size).map(|c| Plan::Rows(c.to_vec())).collect()
        }
        Batching::Grouped | Batching::Joint => {
            let mut starts = data.starts(block, stride)?;
            if let Some(rng) = rng {
                starts.shuffle(rng);
            }
            let per = if batching == Batching::Grouped {
                (batch_size / n).max(1)
            } else {
                batch_size
            };
            starts
                .chunks(per)
                .map(|c| {
                    if batching == Batching::Grouped {
                        Plan::Grouped(c.to_vec())
                    } else {
                        Plan::Joint(c.to_vec())
                    }
                })
                .collect()
        }
    })
}

/// Mean squared error over observed targets, on the tape.
pub fn masked_mse(g: &mut Graph, pred: Var, batch: &WindowBatch) -> Result<Var> {
    let observed = batch.observed_targets();
    if observed == 0 {
        return Err(Error::InvalidArgument("batch has no observed targets".into()));
    }
    let mask: Vec<f64> = batch.target_mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(Tensor::new(batch.target.shape().to_vec(), mask)?);
    let target = g.constant(batch.target.clone());
    let diff = g.sub(pred, target)?;
    let diff = g.mul(diff, mask)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / observed as f64))
}

/// One Adam step on a batch; returns the loss before the update.
pub fn step(model: &mut ForecastModel, batch: &WindowBatch, lr: f64, dropout_seed: u64) -> Result<f64> {
    let mut g = Graph::new(true, dropout_seed);
    let pred = model.forward(&mut g, batch)?;
    let loss = masked_mse(&mut g, pred, batch)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grads = g.backward(loss)?;
    model.store.adam_step(&g.param_grads(&grads), lr);
    Ok(value)
}

/// Repeated steps on one batch; returns the loss after each step.
pub fn fit_batch(model: &mut ForecastModel, batch: &WindowBatch, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        step(model, batch, lr, s as u64)?;
        let mut g = Graph::new(false, 0);
        let pred = model.forward(&mut g, batch)?;
        let loss = masked_mse(&mut g, pred, batch)?;
        losses.push(g.value(loss).item());
    }
    Ok(losses)
}

/// Scaled-space metrics over a block, plus raw-unit metrics when asked.
pub fn evaluate_block(
    model: &ForecastModel,
    data: &PreparedData,
    block: Block,
    stride: usize,
    batch_size: usize,
    unscaled: bool,
) -> Result<(Metrics, Option<Metrics>)> {
    let batching = model.batching();
    let plans = plan_batches(data, block, batching, stride, batch_size, None)?;
    let mut acc = MetricAccumulator::new(data.horizon);
    let mut raw = MetricAccumulator::new(data.horizon);
    for plan in &plans {
        let batch = plan.materialize(data);
        let pred = model.predict(&batch)?;
        acc.add(&pred, &batch.target, &batch.target_mask)?;
        if unscaled {
            raw.add_unscaled(&pred, &batch, &data.scaler, batching == Batching::Joint)?;
        }
    }
    Ok((acc.finish()?, if unscaled { Some(raw.finish()?) } else { None }))
}

/// MSE and MAE over all windows of a block.
pub fn evaluate(model: &ForecastModel, data: &PreparedData, block: Block, stride: usize) -> Result<Metrics> {
    Ok(evaluate_block(model, data, block, stride, DEFAULT_BATCH_SIZE, false)?.0)
}

/// Trains with Adam and early stopping on val MSE, restoring the best
/// parameters. Closed-form models are fit directly.
pub fn train(model: &mut ForecastModel, data: &PreparedData, spec: &TrainSpec, seed: u64) -> Result<History> {
    let batching = model.batching();
    train_with(model, data, spec, seed, batching)
}

/// Like [`train`] but with an explicit batching, used to give both arms of a
/// paired comparison the same data order.
pub fn train_with(
    model: &mut ForecastModel,
    data: &PreparedData,
    spec: &TrainSpec,
    seed: u64,
    batching: Batching,
) -> Result<History> {
    spec.validate()?;
    if batching == Batching::Independent && model.batching() != Batching::Independent
        || (batching == Batching::Joint) != (model.batching() == Batching::Joint)
    {
        return Err(Error::Config(format!(
            "model needs {:?} batches, not {batching:?}",
            model.batching()
        )));
    }
    if let Body::Ridge(r) = &mut model.body {
        let t0 = Instant::now();
        r.fit(data, spec.ridge_budget)?;
        let val = evaluate(model, data, Block::Val, spec.eval_stride)?.mse;
        return Ok(History {
            epochs: vec![EpochRecord {
                epoch: 0,
                train_loss: f64::NAN,
                val_mse: val,
            }],
            best_epoch: Some(0),
            best_val_mse: val,
            stopped_early: false,
            batch_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = History {
        best_val_mse: f64::INFINITY,
        ..History::default()
    };
    let mut best = model.store.clone();
    let mut since_best = 0;
    let (mut steps, mut elapsed) = (0u64, 0.0);
    for epoch in 0..spec.max_epochs {
        let mut plans = plan_batches(
            data,
            Block::Train,
            batching,
            spec.train_stride,
            spec.batch_size,
            Some(&mut rng),
        )?;
        if let Some(cap) = spec.max_batches_per_epoch {
            plans.truncate(cap);
        }
        let (mut loss_sum, mut weight) = (0.0, 0.0);
        for plan in &plans {
            let batch = plan.materialize(data);
            let t0 = Instant::now();
            let loss = match step(model, &batch, spec.lr, seed.wrapping_mul(1_000_003).wrapping_add(steps)) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                other => other?,
            };
            elapsed += t0.elapsed().as_secs_f64();
            steps += 1;
            let w = batch.observed_targets() as f64;
            loss_sum += loss * w;
            weight += w;
        }
        let train_loss = loss_sum / weight.max(1.0);
        let val_mse = match evaluate(model, data, Block::Val, spec.eval_stride) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
            other => other?.mse,
        };
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_mse });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
        });
        if val_mse < history.best_val_mse {
            history.best_val_mse = val_mse;
            history.best_epoch = Some(epoch);
            best = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= spec.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.store = best;
    history.batch_time_ms = if steps > 0 { elapsed * 1e3 / steps as f64 } else { 0.0 };
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{build, ModelConfig};
    use crate::dataio::{CovariateSet, SeriesCollection};
    use crate::temporal::TemporalKind;

    fn data() -> PreparedData {
        let (n, t) = (2, 160);
        let values = (0..n * t)
            .map(|k| ((k % t) as f64 * 0.3).sin() * (1.0 + (k / t) as f64))
            .collect();
        let ts = (0..t as i64).map(|k| 3600 * k).collect();
        let c = SeriesCollection::new(n, t, 1, values, ts, 3600).unwrap();
        PreparedData::new(&c, &SplitSpec::default(), true, CovariateSet::None, 12, 3).unwrap()
    }

    fn spec() -> TrainSpec {
        TrainSpec {
            max_epochs: 4,
            batch_size: 16,
            lr: 1e-2,
            patience: 2,
            seeds: vec![0],
            ..TrainSpec::default()
        }
    }

    fn model() -> ForecastModel {
        build(&ModelConfig::reference(TemporalKind::Mlp, 2, 12, 3, 8)).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_losses_constant() {
        let d = data();
        let mut m = model();
        let s = TrainSpec { lr: 0.0, ..spec() };
        let h = train(&mut m, &d, &s, 3).unwrap();
        let v: Vec<f64> = h.epochs.iter().map(|e| e.val_mse).collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]));
        let tl: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
        assert!(tl.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
        assert!(h.stopped_early);
    }

    #[test]
    fn fixed_seed_repeats_history() {
        let d = data();
        let (mut a, mut b) = (model(), model());
        let ha = train(&mut a, &d, &spec(), 5).unwrap();
        let hb = train(&mut b, &d, &spec(), 5).unwrap();
        assert_eq!(
            ha.epochs.iter().map(|e| (e.train_loss, e.val_mse)).collect::<Vec<_>>(),
            hb.epochs.iter().map(|e| (e.train_loss, e.val_mse)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn restores_best_parameters() {
        let d = data();
        let mut m = model();
        let s = TrainSpec {
            lr: 0.3,
            max_epochs: 6,
            patience: 10,
            ..spec()
        };
        let h = train(&mut m, &d, &s, 1).unwrap();
        let best = h.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        let now = evaluate(&m, &d, Block::Val, 1).unwrap().mse;
        assert_eq!(now, best);
        assert_eq!(h.best_val_mse, best);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let d = data();
        let mut m = model();
        m.store.get_mut("decoder.weight").unwrap().value.data_mut()[0] = f64::NAN;
        match train(&mut m, &d, &spec(), 0) {
            Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_ignores_window_order() {
        let d = data();
        let m = model();
        let idx = d.windows(Block::Test, 1).unwrap();
        let mut rev = idx.clone();
        rev.reverse();
        let score = |idx: &[WindowIndex]| {
            let mut acc = MetricAccumulator::new(3);
            for c in idx.chunks(7) {
                let b = d.batch(c);
                acc.add(&m.predict(&b).unwrap(), &b.target, &b.target_mask).unwrap();
            }
            acc.finish().unwrap()
        };
        let (a, b) = (score(&idx), score(&rev));
        assert!((a.mse - b.mse).abs() < 1e-12 * a.mse.max(1.0));
        assert_eq!(a.mse, evaluate(&m, &d, Block::Test, 1).unwrap().mse);
    }

    #[test]
    fn grouped_plans_hold_whole_groups() {
        let d = data();
        let plans = plan_batches(&d, Block::Train, Batching::Grouped, 1, 5, None).unwrap();
        let b = plans[0].materialize(&d);
        assert_eq!(b.len(), 4);
        assert_eq!(b.series, vec![0, 1, 0, 1]);
    }

    #[test]
    fn unscaled_metrics_undo_the_scaler() {
        let d = data();
        let m = model();
        let (s, raw) = evaluate_block(&m, &d, Block::Test, 1, 8, true).unwrap();
        let raw = raw.unwrap();
        assert!(raw.mse.is_finite() && s.mse.is_finite());
        assert_ne!(raw.mse, s.mse);
    }
}
