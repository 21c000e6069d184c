use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Family, Mode, ModelConfig};
use crate::autodiff::nn::{gather_rows, Linear, Scope};
use crate::autodiff::{Graph, ParameterStore, Partition, Tensor, Var};
use crate::dataio::{CovariateSet, WindowBatch, CALENDAR_CHANNELS};
use crate::error::{Error, Result};
use crate::linear::{DLinear, RidgeLinearModel};
use crate::preprocess::{
    attach_local_embedding, Encoder, EncodingMode, FeatureEncoder, LocalEmbedding, PatchEncoder, RevIN,
};
use crate::spatial::SpatialBlock;
use crate::temporal::TemporalBlock;

/// How windows must be batched for a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batching {
    /// Any set of (series, start) rows.
    Independent,
    /// All `N` series of a window together, ordered by series.
    Grouped,
    /// One row per window with the series stacked as channels.
    Joint,
}

/// Reference pipeline: RevIN, encoder, local embedding, temporal block,
/// future-covariate injection, spatial block, linear decoder, inverse RevIN.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub revin: Option<RevIN>,
    pub encoder: Encoder,
    pub embedding: Option<LocalEmbedding>,
    pub temporal: TemporalBlock,
    /// `relu(A flatten(u_future))`, added to the hidden state.
    pub future: Option<Linear>,
    pub spatial: SpatialBlock,
    pub decoder: Linear,
    horizon: usize,
    channels: usize,
}

fn finite(g: &Graph, v: Var, stage: &'static str) -> Result<Var> {
    if g.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(stage))
    }
}

impl Pipeline {
    fn build(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        scope: &Scope,
        n_embed: usize,
    ) -> Result<Self> {
        let channels = cfg.model_channels();
        let d_u = match cfg.covariates {
            CovariateSet::None => 0,
            CovariateSet::Calendar => CALENDAR_CHANNELS,
        };
        let revin = cfg
            .revin
            .then(|| RevIN::new(store, &scope.child("revin"), channels, cfg.revin_affine));
        let encoder = match cfg.encoding_mode() {
            EncodingMode::PerStep => Encoder::PerStep(FeatureEncoder::new(
                store,
                rng,
                &scope.child("encoder"),
                channels,
                d_u,
                cfg.hidden,
            )),
            EncodingMode::Patched => {
                let (p, s) = cfg.patch();
                Encoder::Patched(PatchEncoder::new(
                    store,
                    rng,
                    &scope.child("encoder"),
                    channels + d_u,
                    cfg.hidden,
                    p,
                    s,
                ))
            }
        };
        let embedding = (cfg.mode == Mode::Hybrid)
            .then(|| LocalEmbedding::new(store, rng, &Scope::shared("local"), n_embed, cfg.d_emb));
        let temporal = TemporalBlock::new(
            store,
            rng,
            &scope.child("temporal"),
            &cfg.temporal_config(),
            cfg.sequence_len()?,
            cfg.hidden + cfg.d_emb,
        )?;
        let future = (d_u > 0).then(|| Linear::new(store, rng, &scope.child("future"), cfg.horizon * d_u, cfg.hidden));
        let spatial = SpatialBlock::new(store, rng, &scope.child("spatial"), &cfg.spatial_config())?;
        let decoder = Linear::new(store, rng, &scope.child("decoder"), cfg.hidden, cfg.horizon * channels);
        Ok(Self {
            revin,
            encoder,
            embedding,
            temporal,
            future,
            spatial,
            decoder,
            horizon: cfg.horizon,
            channels,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, batch: &WindowBatch, n_series: usize) -> Result<Var> {
        let b = batch.len();
        let (x, state) = match &self.revin {
            Some(r) => {
                let (x, s) = r.normalize(g, store, &batch.past, Some(&batch.past_mask))?;
                (x, Some(s))
            }
            None => (g.constant(batch.past.clone()), None),
        };
        let use_exog = self.future.is_some();
        let exog = |t: &Option<Tensor>| -> Result<Tensor> {
            t.clone()
                .ok_or_else(|| Error::Config("model expects covariates but the batch has none".into()))
        };
        let u_past = if use_exog {
            Some(g.constant(exog(&batch.past_exog)?))
        } else {
            None
        };
        let enc = self.encoder.forward(g, store, x, u_past)?;
        let enc = finite(g, enc, "preprocess")?;
        let enc = attach_local_embedding(g, store, enc, &batch.series, self.embedding.as_ref())?;
        let mut h = self.temporal.forward(g, store, enc)?;
        h = finite(g, h, "temporal")?;
        if let Some(future) = &self.future {
            let u = exog(&batch.future_exog)?;
            let numel = u.numel();
            let u = g.constant(u.reshape(vec![b, numel / b.max(1)])?);
            let f = future.forward(g, store, u)?;
            let f = g.relu(f);
            h = g.add(h, f)?;
        }
        h = self.spatial.forward(g, store, h, n_series)?;
        h = finite(g, h, "spatial")?;
        let y = self.decoder.forward(g, store, h)?;
        let mut y = g.reshape(y, &[b, self.horizon, self.channels])?;
        if let (Some(r), Some(s)) = (&self.revin, state) {
            y = r.denormalize(g, store, y, &s)?;
        }
        finite(g, y, "decoder")
    }
}

#[derive(Clone, Debug)]
pub enum Body {
    /// One pipeline, or one per series in local mode.
    Reference(Vec<Pipeline>),
    DLinear {
        model: DLinear,
        revin: Option<RevIN>,
    },
    Ridge(RidgeLinearModel),
}

/// A built model: configuration, parameters and the composed stages.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub body: Body,
}

/// Builds the model described by `cfg`, initializing parameters from
/// `cfg.seed`.
pub fn build(cfg: &ModelConfig) -> Result<ForecastModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    let body = match cfg.family {
        Family::Reference => {
            if cfg.mode == Mode::Local {
                let mut copies = Vec::with_capacity(cfg.n_series);
                for i in 0..cfg.n_series {
                    let scope = Scope {
                        prefix: format!("s{i}"),
                        partition: Partition::Series(i),
                    };
                    copies.push(Pipeline::build(&mut store, &mut rng, cfg, &scope, cfg.n_series)?);
                }
                Body::Reference(copies)
            } else {
                Body::Reference(vec![Pipeline::build(
                    &mut store,
                    &mut rng,
                    cfg,
                    &Scope::shared(""),
                    cfg.n_series,
                )?])
            }
        }
        Family::DLinear => {
            let revin = cfg
                .revin
                .then(|| RevIN::new(&mut store, &Scope::shared("revin"), cfg.channels, cfg.revin_affine));
            let model = DLinear::new(
                &mut store,
                &mut rng,
                cfg.mode,
                cfg.window,
                cfg.horizon,
                cfg.channels,
                cfg.n_series,
                cfg.ma_kernel(),
                cfg.d_emb,
            )?;
            Body::DLinear { model, revin }
        }
        Family::Ridge => Body::Ridge(RidgeLinearModel::new(
            cfg.mode,
            cfg.window,
            cfg.horizon,
            cfg.channels,
            cfg.n_series,
            cfg.ridge_lambda(),
            cfg.intercept.unwrap_or(true),
        )?),
    };
    Ok(ForecastModel {
        config: cfg.clone(),
        store,
        body,
    })
}

impl ForecastModel {
    pub fn batching(&self) -> Batching {
        match self.config.mode {
            Mode::Joint => Batching::Joint,
            _ if self.config.spatial.needs_grouping() => Batching::Grouped,
            _ => Batching::Independent,
        }
    }

    pub fn is_closed_form(&self) -> bool {
        matches!(self.body, Body::Ridge(_))
    }

    pub fn param_count(&self) -> usize {
        match &self.body {
            Body::Ridge(r) => r.param_count(),
            _ => self.store.count(),
        }
    }

    /// Names of parameters tied to series identity.
    pub fn per_series_parameters(&self) -> Vec<String> {
        match &self.body {
            Body::Ridge(r) if r.mode == Mode::Local => (0..r.n_series).map(|i| format!("s{i}.weights")).collect(),
            Body::Ridge(r) if r.mode == Mode::Hybrid => vec!["onehot".to_string()],
            Body::Ridge(_) => Vec::new(),
            _ => self.store.per_series_names().into_iter().map(str::to_string).collect(),
        }
    }

    /// Predictions `[B, H, d_x]` on the tape. Closed-form models return a
    /// constant.
    pub fn forward(&self, g: &mut Graph, batch: &WindowBatch) -> Result<Var> {
        let n = self.config.n_series;
        if let Some(bad) = batch.series.iter().find(|s| **s >= n.max(1)) {
            return Err(Error::UnknownSeries { id: *bad, n });
        }
        match &self.body {
            Body::Ridge(r) => Ok(g.constant(r.predict(batch)?)),
            Body::DLinear { model, revin } => {
                let (x, state) = match revin {
                    Some(r) => {
                        let (x, s) = r.normalize(g, &self.store, &batch.past, Some(&batch.past_mask))?;
                        (x, Some(s))
                    }
                    None => (g.constant(batch.past.clone()), None),
                };
                let mut y = model.forward(g, &self.store, x, &batch.series)?;
                if let (Some(r), Some(s)) = (revin, state) {
                    y = r.denormalize(g, &self.store, y, &s)?;
                }
                finite(g, y, "decoder")
            }
            Body::Reference(pipes) if pipes.len() == 1 => {
                let spatial_n = if self.batching() == Batching::Joint { 1 } else { n };
                if self.config.spatial.needs_grouping() && !batch.len().is_multiple_of(n) {
                    return Err(Error::Config(format!(
                        "spatial attention needs batches of whole {n}-series groups, got {} rows",
                        batch.len()
                    )));
                }
                pipes[0].forward(g, &self.store, batch, spatial_n)
            }
            Body::Reference(pipes) => {
                // local: run each series' rows through its own copy, then
                // restore the batch order
                let mut order: Vec<usize> = Vec::new();
                let mut parts = Vec::new();
                for (s, pipe) in pipes.iter().enumerate() {
                    let rows: Vec<usize> = (0..batch.len()).filter(|r| batch.series[*r] == s).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    parts.push(pipe.forward(g, &self.store, &batch.select(&rows), 1)?);
                    order.extend(rows);
                }
                if parts.len() == 1 {
                    return Ok(parts[0]);
                }
                let stacked = g.concat(&parts, 0)?;
                let mut position = vec![0; order.len()];
                for (k, r) in order.iter().enumerate() {
                    position[*r] = k;
                }
                gather_rows(g, stacked, &position)
            }
        }
    }

    /// Forward pass in evaluation mode, returning plain values.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Tensor> {
        let mut g = Graph::new(false, 0);
        let y = self.forward(&mut g, batch)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Block, PreparedData, SeriesCollection, SplitSpec};
    use crate::spatial::SpatialKind;
    use crate::temporal::TemporalKind;

    fn data(n: usize, covariates: CovariateSet) -> PreparedData {
        let t = 200;
        let values = (0..n * t)
            .map(|k| ((k % t) as f64 * 0.2 + (k / t) as f64).sin())
            .collect();
        let ts = (0..t as i64).map(|k| 1_577_836_800 + 3600 * k).collect();
        let c = SeriesCollection::new(n, t, 1, values, ts, 3600).unwrap();
        PreparedData::new(&c, &SplitSpec::default(), true, covariates, 16, 4).unwrap()
    }

    fn cfg(temporal: TemporalKind, spatial: SpatialKind) -> ModelConfig {
        let mut c = ModelConfig::reference(temporal, 3, 16, 4, 8);
        c.spatial = spatial;
        if temporal.is_attention() {
            c.heads = Some(2);
        }
        if spatial == SpatialKind::Attention {
            c.spatial_heads = Some(2);
        }
        c
    }

    fn batch_for(m: &ForecastModel, d: &PreparedData) -> WindowBatch {
        let starts = d.starts(Block::Train, 7).unwrap();
        match m.batching() {
            Batching::Joint => d.joint_batch(&starts[..2]),
            _ => d.grouped_batch(&starts[..2]),
        }
    }

    #[test]
    fn shape_grid() {
        let d = data(3, CovariateSet::None);
        for t in TemporalKind::ALL {
            for s in SpatialKind::ALL {
                let m = build(&cfg(t, s)).unwrap();
                let b = batch_for(&m, &d);
                let y = m.predict(&b).unwrap();
                assert_eq!(y.shape(), &[6, 4, 1], "{t:?} {s:?}");
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn global_rows_are_independent() {
        let d = data(3, CovariateSet::Calendar);
        let mut c = cfg(TemporalKind::Mlp, SpatialKind::None);
        c.covariates = CovariateSet::Calendar;
        let m = build(&c).unwrap();
        let b = batch_for(&m, &d);
        let base = m.predict(&b).unwrap();
        let mut other = b.clone();
        for v in &mut other.past.data_mut()[16..32] {
            *v += 5.0;
        }
        let y = m.predict(&other).unwrap();
        assert_eq!(y.data()[..4], base.data()[..4]);
        assert_eq!(y.data()[8..], base.data()[8..]);
    }

    #[test]
    fn zeroed_table_removes_series_identity() {
        let d = data(3, CovariateSet::None);
        let mut c = cfg(TemporalKind::Mlp, SpatialKind::None);
        c.mode = Mode::Hybrid;
        c.d_emb = 4;
        let mut m = build(&c).unwrap();
        let b = batch_for(&m, &d);
        let mut relabeled = b.clone();
        relabeled.series = vec![0; b.len()];
        assert_ne!(m.predict(&b).unwrap(), m.predict(&relabeled).unwrap());
        m.store.get_mut("local.table").unwrap().value.data_mut().fill(0.0);
        assert_eq!(m.predict(&b).unwrap(), m.predict(&relabeled).unwrap());
        assert_eq!(m.per_series_parameters(), vec!["local.table"]);
    }

    #[test]
    fn local_counts_scale_with_series() {
        let g = build(&cfg(TemporalKind::Tcn, SpatialKind::None)).unwrap();
        let mut c = cfg(TemporalKind::Tcn, SpatialKind::None);
        c.mode = Mode::Local;
        let l = build(&c).unwrap();
        assert_eq!(l.param_count(), 3 * g.param_count());
        assert_eq!(l.store.shared_count(), 0);
    }

    #[test]
    fn local_rows_use_their_own_copy() {
        let d = data(3, CovariateSet::None);
        let mut c = cfg(TemporalKind::Mlp, SpatialKind::None);
        c.mode = Mode::Local;
        let m = build(&c).unwrap();
        let b = batch_for(&m, &d);
        let y = m.predict(&b).unwrap();
        for r in 0..b.len() {
            let alone = m.predict(&b.select(&[r])).unwrap();
            assert_eq!(alone.data(), &y.data()[r * 4..(r + 1) * 4]);
        }
    }

    #[test]
    fn spatial_none_matches_temporal_only_model() {
        let d = data(3, CovariateSet::None);
        let m = build(&cfg(TemporalKind::Rnn, SpatialKind::None)).unwrap();
        let b = batch_for(&m, &d);
        let Body::Reference(p) = &m.body else { unreachable!() };
        let mut g = Graph::new(false, 0);
        let (x, s) = p[0]
            .revin
            .as_ref()
            .unwrap()
            .normalize(&mut g, &m.store, &b.past, Some(&b.past_mask))
            .unwrap();
        let enc = p[0].encoder.forward(&mut g, &m.store, x, None).unwrap();
        let h = p[0].temporal.forward(&mut g, &m.store, enc).unwrap();
        let y = p[0].decoder.forward(&mut g, &m.store, h).unwrap();
        let y = g.reshape(y, &[6, 4, 1]).unwrap();
        let y = p[0]
            .revin
            .as_ref()
            .unwrap()
            .denormalize(&mut g, &m.store, y, &s)
            .unwrap();
        assert_eq!(g.value(y), &m.predict(&b).unwrap());
    }

    #[test]
    fn joint_mode_sees_all_series_as_channels() {
        let d = data(3, CovariateSet::None);
        let mut c = cfg(TemporalKind::Mlp, SpatialKind::None);
        c.mode = Mode::Joint;
        let m = build(&c).unwrap();
        assert_eq!(m.batching(), Batching::Joint);
        let b = batch_for(&m, &d);
        assert_eq!(m.predict(&b).unwrap().shape(), &[2, 4, 3]);
    }

    #[test]
    fn ungrouped_batch_rejected_for_spatial_attention() {
        let d = data(3, CovariateSet::None);
        let m = build(&cfg(TemporalKind::Mlp, SpatialKind::Attention)).unwrap();
        let idx = d.windows(Block::Train, 50).unwrap();
        let b = d.batch(&idx[..2]);
        assert!(m.predict(&b).is_err());
    }

    #[test]
    fn revin_makes_forecasts_shift_scale_equivariant() {
        let d = data(3, CovariateSet::None);
        let m = build(&cfg(TemporalKind::Transformer, SpatialKind::None)).unwrap();
        let b = batch_for(&m, &d);
        let y = m.predict(&b).unwrap();
        let (a, c) = (2.5, -1.25);
        let mut moved = b.clone();
        moved.past.data_mut().iter_mut().for_each(|v| *v = a * *v + c);
        let z = m.predict(&moved).unwrap();
        for (p, q) in y.data().iter().zip(z.data()) {
            assert!((a * p + c - q).abs() < 1e-5);
        }
    }
}
