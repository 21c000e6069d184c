use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::calendar::encode_calendar;
use super::collection::SeriesCollection;
use super::scaler::Scaler;
use super::split::{split, SplitRanges, SplitSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Exogenous inputs fed to the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateSet {
    #[default]
    None,
    /// Calendar encoding, plus any exogenous channels carried by the collection.
    Calendar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Train,
    Val,
    Test,
}

/// One window: series `series`, forecast steps `start..start + H`, inputs
/// `start - W..start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowIndex {
    pub series: usize,
    pub start: usize,
}

/// A batch of `B` windows.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `[B, W, d_x]`, masked inputs set to 0.
    pub past: Tensor,
    /// `[B, W, d_x]`
    pub past_mask: Vec<bool>,
    /// `[B, W, d_u]`
    pub past_exog: Option<Tensor>,
    /// `[B, H, d_u]`
    pub future_exog: Option<Tensor>,
    /// `[B, H, d_x]`, masked targets set to 0.
    pub target: Tensor,
    /// `[B, H, d_x]`
    pub target_mask: Vec<bool>,
    pub series: Vec<usize>,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn window(&self) -> usize {
        self.past.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.past.shape()[2]
    }

    pub fn observed_targets(&self) -> usize {
        self.target_mask.iter().filter(|m| **m).count()
    }

    /// The given rows, in order.
    pub fn select(&self, rows: &[usize]) -> WindowBatch {
        let pick = |t: &Tensor| -> Tensor {
            let mut shape = t.shape().to_vec();
            let per: usize = shape[1..].iter().product();
            let mut data = Vec::with_capacity(rows.len() * per);
            for r in rows {
                data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
            }
            shape[0] = rows.len();
            Tensor::new(shape, data).expect("shape matches")
        };
        let pick_mask = |m: &[bool], per: usize| -> Vec<bool> {
            rows.iter()
                .flat_map(|r| m[r * per..(r + 1) * per].iter().copied())
                .collect()
        };
        WindowBatch {
            past: pick(&self.past),
            past_mask: pick_mask(&self.past_mask, self.window() * self.channels()),
            past_exog: self.past_exog.as_ref().map(pick),
            future_exog: self.future_exog.as_ref().map(pick),
            target: pick(&self.target),
            target_mask: pick_mask(&self.target_mask, self.horizon() * self.channels()),
            series: rows.iter().map(|r| self.series[*r]).collect(),
            starts: rows.iter().map(|r| self.starts[*r]).collect(),
        }
    }
}

/// Start indices `t` with `range.start + W <= t` and `t + H <= range.end`.
pub fn window_starts(range: Range<usize>, window: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if window + horizon > range.len() {
        return Err(Error::BlockTooShort {
            block: "window",
            len: range.len(),
            needed: window + horizon,
        });
    }
    Ok((range.start + window..=range.end - horizon).step_by(stride).collect())
}

/// Builds batches of `batch_size` windows over every series of `c` for the
/// given range.
pub fn make_windows<'a>(
    c: &'a SeriesCollection,
    range: Range<usize>,
    window: usize,
    horizon: usize,
    stride: usize,
    batch_size: usize,
) -> Result<impl Iterator<Item = WindowBatch> + 'a> {
    let starts = window_starts(range, window, horizon, stride)?;
    let idx: Vec<WindowIndex> = (0..c.n_series())
        .flat_map(|series| starts.iter().map(move |start| WindowIndex { series, start: *start }))
        .collect();
    let exog = c.exogenous.clone();
    let batch_size = batch_size.max(1);
    Ok((0..idx.len()).step_by(batch_size).map(move |s| {
        let chunk = &idx[s..(s + batch_size).min(idx.len())];
        assemble(c, exog.as_ref(), chunk, window, horizon)
    }))
}

fn assemble(
    c: &SeriesCollection,
    exog: Option<&Tensor>,
    idx: &[WindowIndex],
    window: usize,
    horizon: usize,
) -> WindowBatch {
    let (b, d) = (idx.len(), c.channels());
    let mut past = Vec::with_capacity(b * window * d);
    let mut past_mask = Vec::with_capacity(b * window * d);
    let mut target = Vec::with_capacity(b * horizon * d);
    let mut target_mask = Vec::with_capacity(b * horizon * d);
    for w in idx {
        for t in w.start - window..w.start {
            for ch in 0..d {
                let ok = c.observed(w.series, t, ch);
                past_mask.push(ok);
                past.push(if ok { c.get(w.series, t, ch) } else { 0.0 });
            }
        }
        for t in w.start..w.start + horizon {
            for ch in 0..d {
                let ok = c.observed(w.series, t, ch);
                target_mask.push(ok);
                target.push(if ok { c.get(w.series, t, ch) } else { 0.0 });
            }
        }
    }
    let (past_exog, future_exog) = match exog {
        Some(e) => {
            let du = e.shape()[1];
            let rows = |from: usize, len: usize| -> Tensor {
                let mut data = Vec::with_capacity(b * len * du);
                for w in idx {
                    let s = w.start + from - window;
                    data.extend_from_slice(&e.data()[s * du..(s + len) * du]);
                }
                Tensor::new(vec![b, len, du], data).expect("shape matches")
            };
            (Some(rows(0, window)), Some(rows(window, horizon)))
        }
        None => (None, None),
    };
    WindowBatch {
        past: Tensor::new(vec![b, window, d], past).expect("shape matches"),
        past_mask,
        past_exog,
        future_exog,
        target: Tensor::new(vec![b, horizon, d], target).expect("shape matches"),
        target_mask,
        series: idx.iter().map(|w| w.series).collect(),
        starts: idx.iter().map(|w| w.start).collect(),
    }
}

/// A collection after splitting, scaling, and covariate encoding.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Scaled values (or raw values when scaling is off) plus covariates.
    pub data: SeriesCollection,
    pub scaler: Scaler,
    pub ranges: SplitRanges,
    pub window: usize,
    pub horizon: usize,
}

impl PreparedData {
    pub fn new(
        raw: &SeriesCollection,
        spec: &SplitSpec,
        scale: bool,
        covariates: CovariateSet,
        window: usize,
        horizon: usize,
    ) -> Result<Self> {
        if window == 0 || horizon == 0 {
            return Err(Error::InvalidArgument("window and horizon must be >= 1".into()));
        }
        let ranges = split(raw.steps(), spec, window + horizon)?;
        let scaler = if scale {
            Scaler::fit(raw, ranges.train.clone())
        } else {
            Scaler::identity(raw.n_series(), raw.channels())
        };
        let mut data = scaler.apply(raw);
        data.exogenous = match covariates {
            CovariateSet::None => None,
            CovariateSet::Calendar => {
                let cal = encode_calendar(&raw.timestamps);
                Some(match &raw.exogenous {
                    Some(extra) => concat_columns(&cal, extra)?,
                    None => cal,
                })
            }
        };
        Ok(Self {
            data,
            scaler,
            ranges,
            window,
            horizon,
        })
    }

    pub fn n_series(&self) -> usize {
        self.data.n_series()
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn exogenous_channels(&self) -> usize {
        self.data.exogenous_channels()
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        match block {
            Block::Train => self.ranges.train.clone(),
            Block::Val => self.ranges.val.clone(),
            Block::Test => self.ranges.test.clone(),
        }
    }

    pub fn starts(&self, block: Block, stride: usize) -> Result<Vec<usize>> {
        window_starts(self.range(block), self.window, self.horizon, stride)
    }

    /// Every (series, start) pair of a block.
    pub fn windows(&self, block: Block, stride: usize) -> Result<Vec<WindowIndex>> {
        let starts = self.starts(block, stride)?;
        Ok((0..self.n_series())
            .flat_map(|series| starts.iter().map(move |start| WindowIndex { series, start: *start }))
            .collect())
    }

    pub fn batch(&self, idx: &[WindowIndex]) -> WindowBatch {
        assemble(&self.data, self.data.exogenous.as_ref(), idx, self.window, self.horizon)
    }

    /// All `N` series for each start, ordered `[start][series]`.
    pub fn grouped_batch(&self, starts: &[usize]) -> WindowBatch {
        let idx: Vec<WindowIndex> = starts
            .iter()
            .flat_map(|start| (0..self.n_series()).map(move |series| WindowIndex { series, start: *start }))
            .collect();
        self.batch(&idx)
    }

    /// One window per start with the `N` series stacked as channels
    /// (`d_x' = N * d_x`), series id 0.
    pub fn joint_batch(&self, starts: &[usize]) -> WindowBatch {
        let grouped = self.grouped_batch(starts);
        stack_series_as_channels(&grouped, self.n_series())
    }
}

/// `[G*N, L, d]` grouped rows to `[G, L, N*d]`.
pub fn stack_series_as_channels(b: &WindowBatch, n: usize) -> WindowBatch {
    let g = b.len() / n;
    let stack = |t: &Tensor| -> Tensor {
        let (l, d) = (t.shape()[1], t.shape()[2]);
        let mut out = vec![0.0; g * l * n * d];
        for gi in 0..g {
            for i in 0..n {
                for s in 0..l {
                    for ch in 0..d {
                        out[(gi * l + s) * n * d + i * d + ch] = t.data()[((gi * n + i) * l + s) * d + ch];
                    }
                }
            }
        }
        Tensor::new(vec![g, l, n * d], out).expect("shape matches")
    };
    let stack_mask = |m: &[bool], l: usize, d: usize| -> Vec<bool> {
        let mut out = vec![false; g * l * n * d];
        for gi in 0..g {
            for i in 0..n {
                for s in 0..l {
                    for ch in 0..d {
                        out[(gi * l + s) * n * d + i * d + ch] = m[((gi * n + i) * l + s) * d + ch];
                    }
                }
            }
        }
        out
    };
    let (w, h, d) = (b.window(), b.horizon(), b.channels());
    let first_of_group = |t: &Option<Tensor>| -> Option<Tensor> {
        t.as_ref().map(|e| {
            let (l, du) = (e.shape()[1], e.shape()[2]);
            let mut data = Vec::with_capacity(g * l * du);
            for gi in 0..g {
                data.extend_from_slice(&e.data()[gi * n * l * du..][..l * du]);
            }
            Tensor::new(vec![g, l, du], data).expect("shape matches")
        })
    };
    WindowBatch {
        past: stack(&b.past),
        past_mask: stack_mask(&b.past_mask, w, d),
        past_exog: first_of_group(&b.past_exog),
        future_exog: first_of_group(&b.future_exog),
        target: stack(&b.target),
        target_mask: stack_mask(&b.target_mask, h, d),
        series: vec![0; g],
        starts: (0..g).map(|gi| b.starts[gi * n]).collect(),
    }
}

/// `[G, H, N*d]` joint predictions back to `[G*N, H, d]` grouped rows.
pub fn unstack_channels(t: &Tensor, n: usize) -> Tensor {
    let (g, l, nd) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = nd / n;
    let mut out = vec![0.0; t.numel()];
    for gi in 0..g {
        for i in 0..n {
            for s in 0..l {
                for ch in 0..d {
                    out[((gi * n + i) * l + s) * d + ch] = t.data()[(gi * l + s) * nd + i * d + ch];
                }
            }
        }
    }
    Tensor::new(vec![g * n, l, d], out).expect("shape matches")
}

fn concat_columns(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, da, db) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != t {
        return Err(Error::InvalidArgument(format!(
            "exogenous has {} rows for {t} steps",
            b.shape()[0]
        )));
    }
    let mut data = Vec::with_capacity(t * (da + db));
    for r in 0..t {
        data.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
        data.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
    }
    Tensor::new(vec![t, da + db], data)
}
