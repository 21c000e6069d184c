use rand::Rng;

use crate::assembly::Mode;
use crate::autodiff::nn::{bind, per_group, Linear, Scope};
use crate::autodiff::{Graph, ParameterStore, Partition, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::preprocess::LocalEmbedding;

pub const DEFAULT_MA_KERNEL: usize = 25;

fn check_kernel(window: usize, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("moving-average kernel {k} must be odd")));
    }
    if k > 2 * window - 1 {
        return Err(Error::Config(format!(
            "moving-average kernel {k} exceeds 2W - 1 for W = {window}"
        )));
    }
    Ok(())
}

/// `[W, W]` matrix `M` with `trend[t] = sum_s x[s] M[s, t]`: a centered mean of
/// width `k` with the ends padded by repeating the first and last value.
pub fn moving_average_matrix(window: usize, k: usize) -> Result<Tensor> {
    check_kernel(window, k)?;
    let half = (k / 2) as isize;
    let mut m = vec![0.0; window * window];
    for t in 0..window as isize {
        for o in -half..=half {
            let s = (t + o).clamp(0, window as isize - 1) as usize;
            m[s * window + t as usize] += 1.0 / k as f64;
        }
    }
    Tensor::new(vec![window, window], m)
}

/// Splits `x [B, W, d]` into trend and seasonal parts along the time axis.
pub fn moving_average_decompose(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("decompose", format!("expected [B, W, d], got {s:?}")));
    }
    let (b, w, d) = (s[0], s[1], s[2]);
    let m = moving_average_matrix(w, k)?;
    let mut trend = Tensor::zeros(s.to_vec());
    for bi in 0..b {
        for t in 0..w {
            for ch in 0..d {
                trend.data_mut()[(bi * w + t) * d + ch] = (0..w)
                    .map(|src| x.data()[(bi * w + src) * d + ch] * m.data()[src * w + t])
                    .sum();
            }
        }
    }
    let seasonal = Tensor::new(
        s.to_vec(),
        x.data().iter().zip(trend.data()).map(|(a, b)| a - b).collect(),
    )?;
    Ok((trend, seasonal))
}

/// Trend and seasonal heads, each a linear map over the time axis applied to
/// every channel.
#[derive(Clone, Debug)]
pub struct DLinearHeads {
    pub trend: Linear,
    pub seasonal: Linear,
}

/// Decomposition-linear forecaster. Hybrid mode appends a learnable
/// per-series vector to the input of both heads; local mode keeps a full copy
/// of the heads per series.
#[derive(Clone, Debug)]
pub struct DLinear {
    pub mode: Mode,
    pub window: usize,
    pub horizon: usize,
    pub channels: usize,
    pub kernel: usize,
    pub heads: Vec<DLinearHeads>,
    pub embedding: Option<LocalEmbedding>,
    average: Tensor,
}

impl DLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        mode: Mode,
        window: usize,
        horizon: usize,
        channels: usize,
        n_series: usize,
        kernel: usize,
        d_emb: usize,
    ) -> Result<Self> {
        let average = moving_average_matrix(window, kernel)?;
        if mode == Mode::Hybrid && d_emb == 0 {
            return Err(Error::Config("hybrid DLinear needs d_emb > 0".into()));
        }
        let emb = if mode == Mode::Hybrid { d_emb } else { 0 };
        let embedding =
            (emb > 0).then(|| LocalEmbedding::new(store, rng, &Scope::shared("dlinear.local"), n_series, emb));
        let make = |store: &mut ParameterStore, rng: &mut R, scope: Scope| DLinearHeads {
            trend: Linear::new(store, rng, &scope.child("trend"), window + emb, horizon),
            seasonal: Linear::new(store, rng, &scope.child("seasonal"), window + emb, horizon),
        };
        let heads = if mode == Mode::Local {
            (0..n_series)
                .map(|i| {
                    make(
                        store,
                        rng,
                        Scope {
                            prefix: format!("s{i}.dlinear"),
                            partition: Partition::Series(i),
                        },
                    )
                })
                .collect()
        } else {
            vec![make(store, rng, Scope::shared("dlinear"))]
        };
        Ok(Self {
            mode,
            window,
            horizon,
            channels,
            kernel,
            heads,
            embedding,
            average,
        })
    }

    /// `x [B, W, d]` to `[B, H, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, series: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.window || s[2] != self.channels || s[0] != series.len() {
            return Err(shape_err(
                "dlinear",
                format!("input {s:?} for window {} and {} ids", self.window, series.len()),
            ));
        }
        if self.mode == Mode::Local {
            if let Some(bad) = series.iter().find(|i| **i >= self.heads.len()) {
                return Err(Error::UnknownSeries {
                    id: *bad,
                    n: self.heads.len(),
                });
            }
            return per_group(g, x, series, |g, id, rows| {
                let n = g.shape(rows)[0];
                self.apply(g, store, &self.heads[id], rows, &vec![id; n])
            });
        }
        self.apply(g, store, &self.heads[0], x, series)
    }

    fn apply(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        heads: &DLinearHeads,
        x: Var,
        series: &[usize],
    ) -> Result<Var> {
        let (b, d) = (series.len(), self.channels);
        let xt = g.permute(x, &[0, 2, 1])?;
        let m = g.constant(self.average.clone());
        let trend = g.matmul(xt, m)?;
        let seasonal = g.sub(xt, trend)?;
        let (trend, seasonal) = match &self.embedding {
            Some(table) => {
                if let Some(bad) = series.iter().find(|i| **i >= table.n_series) {
                    return Err(Error::UnknownSeries {
                        id: *bad,
                        n: table.n_series,
                    });
                }
                let ids: Vec<usize> = series.iter().flat_map(|i| std::iter::repeat_n(*i, d)).collect();
                let t = bind(g, store, &table.table)?;
                let e = g.embedding(t, &ids)?;
                let e = g.reshape(e, &[b, d, table.dim])?;
                (g.concat(&[trend, e], 2)?, g.concat(&[seasonal, e], 2)?)
            }
            None => (trend, seasonal),
        };
        let yt = heads.trend.forward(g, store, trend)?;
        let ys = heads.seasonal.forward(g, store, seasonal)?;
        let y = g.add(yt, ys)?;
        g.permute(y, &[0, 2, 1])
    }
}
