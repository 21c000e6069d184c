//! Input side of the reference architecture: instance normalization, per-step
//! or patched encoding of values and covariates, and local embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{bind, Linear, Scope};
use crate::autodiff::{ConvSpec, Graph, ParameterStore, Partition, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const REVIN_EPS: f64 = 1e-5;

/// Per-window, per-channel statistics from [`revin_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RevINState {
    /// `[B, d_x]`
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub channels: usize,
}

/// Normalizes each window and channel of `x [B, W, d_x]` to zero mean and
/// unit population std over its observed steps. Masked steps come out as 0.
pub fn revin_normalize(x: &Tensor, mask: Option<&[bool]>) -> Result<(Tensor, RevINState)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("revin", format!("expected [B, W, d_x], got {s:?}")));
    }
    let (b, w, d) = (s[0], s[1], s[2]);
    let seen = |k: usize| mask.is_none_or(|m| m[k]);
    let mut mean = vec![0.0; b * d];
    let mut std = vec![1.0; b * d];
    let mut out = x.clone();
    for bi in 0..b {
        for ch in 0..d {
            let idx = (0..w).map(|t| (bi * w + t) * d + ch);
            let obs: Vec<f64> = idx.clone().filter(|k| seen(*k)).map(|k| x.data()[k]).collect();
            if obs.is_empty() {
                return Err(Error::FullyMasked(bi));
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64;
            let sd = var.sqrt().max(REVIN_EPS);
            mean[bi * d + ch] = m;
            std[bi * d + ch] = sd;
            for k in idx {
                out.data_mut()[k] = if seen(k) { (x.data()[k] - m) / sd } else { 0.0 };
            }
        }
    }
    Ok((out, RevINState { mean, std, channels: d }))
}

/// Inverse of [`revin_normalize`] for `y [B, H, d_x]`.
pub fn revin_denormalize(y: &Tensor, state: &RevINState) -> Tensor {
    let d = state.channels;
    let per_row = y.numel() / state.mean.len().max(1) * d;
    let mut out = y.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = (k / per_row) * d + k % d;
        *v = *v * state.std[j] + state.mean[j];
    }
    out
}

/// Expands `[B, d]` statistics to a `[B, L, d]` constant.
fn expand(stats: &[f64], b: usize, l: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for _ in 0..l {
            data.extend_from_slice(&stats[bi * d..(bi + 1) * d]);
        }
    }
    Tensor::new(vec![b, l, d], data).expect("shape matches")
}

/// RevIN with an optional learnable per-channel affine.
#[derive(Clone, Debug)]
pub struct RevIN {
    pub affine: Option<(String, String)>,
}

impl RevIN {
    pub fn new(store: &mut ParameterStore, scope: &Scope, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            let (gamma, beta) = (scope.name("gamma"), scope.name("beta"));
            store.insert(&gamma, Tensor::full(vec![channels], 1.0), scope.partition);
            store.insert(&beta, Tensor::zeros(vec![channels]), scope.partition);
            (gamma, beta)
        });
        Self { affine }
    }

    pub fn normalize(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<(Var, RevINState)> {
        let (xn, state) = revin_normalize(x, mask)?;
        let mut v = g.constant(xn);
        if let Some((gamma, beta)) = &self.affine {
            let gm = bind(g, store, gamma)?;
            let bt = bind(g, store, beta)?;
            v = g.mul(v, gm)?;
            v = g.add(v, bt)?;
        }
        Ok((v, state))
    }

    /// Undoes the affine first, then the statistics.
    pub fn denormalize(&self, g: &mut Graph, store: &ParameterStore, y: Var, state: &RevINState) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let mut v = y;
        if let Some((gamma, beta)) = &self.affine {
            let gm = bind(g, store, gamma)?;
            let bt = bind(g, store, beta)?;
            v = g.sub(v, bt)?;
            v = g.div(v, gm)?;
        }
        let sd = g.constant(expand(&state.std, b, l, d));
        let mu = g.constant(expand(&state.mean, b, l, d));
        v = g.mul(v, sd)?;
        g.add(v, mu)
    }
}

/// Per-step encoder: `relu(A x) + relu(C u)`.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub values: Linear,
    pub covariates: Option<Linear>,
}

impl FeatureEncoder {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        d_x: usize,
        d_u: usize,
        d_h: usize,
    ) -> Self {
        Self {
            values: Linear::new(store, rng, &scope.child("values"), d_x, d_h),
            covariates: (d_u > 0).then(|| Linear::new(store, rng, &scope.child("covariates"), d_u, d_h)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, u: Option<Var>) -> Result<Var> {
        let h = self.values.forward(g, store, x)?;
        let h = g.relu(h);
        match (&self.covariates, u) {
            (Some(lin), Some(u)) => {
                let c = lin.forward(g, store, u)?;
                let c = g.relu(c);
                g.add(h, c)
            }
            (None, None) => Ok(h),
            _ => Err(Error::Config("covariate encoder and covariate input disagree".into())),
        }
    }
}

/// Strided convolution over values concatenated with covariates, then relu.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub weight: String,
    pub bias: String,
    pub patch: usize,
    pub stride: usize,
}

/// `floor((W - P) / S) + 1`, or an error when the patch is longer than the
/// window.
pub fn patch_count(window: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch length and stride must be >= 1".into()));
    }
    if patch > window {
        return Err(Error::Config(format!("patch length {patch} exceeds window {window}")));
    }
    Ok((window - patch) / stride + 1)
}

impl PatchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        channels: usize,
        d_h: usize,
        patch: usize,
        stride: usize,
    ) -> Self {
        let weight = scope.name("weight");
        let bias = scope.name("bias");
        let fan_in = patch * channels;
        store.insert_uniform(&weight, &[patch, channels, d_h], fan_in, scope.partition, rng);
        store.insert_uniform(&bias, &[d_h], fan_in, scope.partition, rng);
        Self {
            weight,
            bias,
            patch,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, u: Option<Var>) -> Result<Var> {
        patch_count(g.shape(x)[1], self.patch, self.stride)?;
        let input = match u {
            Some(u) => g.concat(&[x, u], 2)?,
            None => x,
        };
        let w = bind(g, store, &self.weight)?;
        let b = bind(g, store, &self.bias)?;
        let h = g.conv1d(input, w, b, ConvSpec::strided(self.stride))?;
        Ok(g.relu(h))
    }
}

/// `N x d_emb` table, one row per series.
#[derive(Clone, Debug)]
pub struct LocalEmbedding {
    pub table: String,
    pub n_series: usize,
    pub dim: usize,
}

impl LocalEmbedding {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, scope: &Scope, n_series: usize, dim: usize) -> Self {
        let table = scope.name("table");
        if dim > 0 {
            // unit-scale rows so series are distinguishable from the start
            let data = (0..n_series * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.insert(
                &table,
                Tensor::new(vec![n_series, dim], data).expect("shape matches"),
                Partition::SeriesRows,
            );
        }
        Self { table, n_series, dim }
    }
}

/// Concatenates each row's series embedding to every step of `enc [B, L, d]`.
/// Without a table this is the identity.
pub fn attach_local_embedding(
    g: &mut Graph,
    store: &ParameterStore,
    enc: Var,
    ids: &[usize],
    table: Option<&LocalEmbedding>,
) -> Result<Var> {
    let Some(table) = table else {
        return Ok(enc);
    };
    let shape = g.shape(enc).to_vec();
    if shape.len() != 3 || shape[0] != ids.len() {
        return Err(shape_err(
            "local embedding",
            format!("encoding {shape:?} for {} series ids", ids.len()),
        ));
    }
    if let Some(bad) = ids.iter().find(|i| **i >= table.n_series) {
        return Err(Error::UnknownSeries {
            id: *bad,
            n: table.n_series,
        });
    }
    if table.dim == 0 {
        return Ok(enc);
    }
    let (b, l) = (shape[0], shape[1]);
    let repeated: Vec<usize> = ids.iter().flat_map(|i| std::iter::repeat_n(*i, l)).collect();
    let t = bind(g, store, &table.table)?;
    let e = g.embedding(t, &repeated)?;
    let e = g.reshape(e, &[b, l, table.dim])?;
    g.concat(&[enc, e], 2)
}

/// How the window is turned into a sequence of `d_h` vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    PerStep,
    Patched,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    PerStep(FeatureEncoder),
    Patched(PatchEncoder),
}

impl Encoder {
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, u: Option<Var>) -> Result<Var> {
        match self {
            Encoder::PerStep(e) => e.forward(g, store, x, u),
            Encoder::Patched(e) => e.forward(g, store, x, u),
        }
    }
}
