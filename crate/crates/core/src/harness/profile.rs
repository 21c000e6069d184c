use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Stat;
use super::train::{plan_batches, step};
use crate::assembly::{build, Body, ModelConfig};
use crate::dataio::{Block, PreparedData};
use crate::error::{Error, Result};

pub const WARMUP_BATCHES: usize = 5;
pub const MIN_TIMED_BATCHES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Wall-clock time of one training step over the timed batches.
    pub batch_time_ms: Stat,
    pub batches_per_second: f64,
    pub param_count: usize,
    pub timed_batches: usize,
    /// Parameters, both Adam moments, and the largest tape, in bytes.
    pub peak_bytes_estimate: usize,
}

/// Times training steps on training batches, cycling when the block is short.
/// The first [`WARMUP_BATCHES`] are excluded.
pub fn profile(config: &ModelConfig, data: &PreparedData, batch_size: usize, timed: usize) -> Result<Profile> {
    let timed = timed.max(MIN_TIMED_BATCHES);
    let mut model = build(config)?;
    if matches!(model.body, Body::Ridge(_)) {
        return Err(Error::InvalidArgument(
            "closed-form models have no training step to profile".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plans = plan_batches(data, Block::Train, model.batching(), 1, batch_size, Some(&mut rng))?;
    if plans.is_empty() {
        return Err(Error::InvalidArgument("no training windows to profile".into()));
    }
    let mut times = Vec::with_capacity(timed);
    let mut peak_tape = 0;
    for k in 0..WARMUP_BATCHES + timed {
        let batch = plans[k % plans.len()].materialize(data);
        let t0 = Instant::now();
        step(&mut model, &batch, 1e-3, k as u64)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if k >= WARMUP_BATCHES {
            times.push(ms);
        }
        if k == 0 {
            let mut g = crate::autodiff::Graph::new(true, 0);
            let pred = model.forward(&mut g, &batch)?;
            super::train::masked_mse(&mut g, pred, &batch)?;
            // backward holds roughly one gradient per tape value
            peak_tape = 2 * g.footprint();
        }
    }
    let stat = Stat::of(&times);
    let params = model.param_count();
    Ok(Profile {
        batch_time_ms: stat,
        batches_per_second: 1e3 / stat.mean,
        param_count: params,
        timed_batches: times.len(),
        peak_bytes_estimate: 8 * (3 * params + peak_tape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Mode;
    use crate::dataio::{CovariateSet, SeriesCollection, SplitSpec};
    use crate::temporal::TemporalKind;

    fn data(n: usize) -> PreparedData {
        let t = 120;
        let values = (0..n * t).map(|k| (k as f64 * 0.1).cos()).collect();
        let c = SeriesCollection::new(n, t, 1, values, (0..t as i64).collect(), 1).unwrap();
        PreparedData::new(&c, &SplitSpec::default(), true, CovariateSet::None, 8, 2).unwrap()
    }

    #[test]
    fn reports_reciprocal_rate_and_counts() {
        let cfg = ModelConfig::reference(TemporalKind::Mlp, 2, 8, 2, 4);
        let p = profile(&cfg, &data(2), 8, 50).unwrap();
        assert_eq!(p.timed_batches, 50);
        assert!((p.batches_per_second * p.batch_time_ms.mean / 1e3 - 1.0).abs() < 0.05);
        assert_eq!(p.param_count, build(&cfg).unwrap().param_count());
    }

    #[test]
    fn linear_decoder_only_count_by_hand() {
        // mlp, one residual block, no RevIN: encoder d_x -> d_h per step,
        // input projection W*d_h -> d_h, two d_h x d_h layers, decoder d_h -> H
        let mut cfg = ModelConfig::reference(TemporalKind::Mlp, 2, 8, 2, 4);
        cfg.layers = 1;
        cfg.revin = false;
        let (w, h, d) = (8, 2, 4);
        let hand = (d + d) + (w * d * d + d) + 2 * (d * d + d) + (d * h + h);
        assert_eq!(build(&cfg).unwrap().param_count(), hand);
        let mut local = cfg.clone();
        local.mode = Mode::Local;
        assert_eq!(build(&local).unwrap().param_count(), 2 * hand);
    }
}
