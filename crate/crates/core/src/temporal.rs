//! Temporal operators mapping an encoded sequence `[B, L, d_in]` to one
//! hidden vector per row, `[B, d_h]`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{bind, FeedForward, LayerNorm, Linear, MultiHeadAttention, Scope};
use crate::autodiff::{ConvSpec, Graph, ParameterStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    Mlp,
    Rnn,
    Tcn,
    Transformer,
    Pyraformer,
}

impl TemporalKind {
    pub const ALL: [TemporalKind; 5] = [
        TemporalKind::Mlp,
        TemporalKind::Rnn,
        TemporalKind::Tcn,
        TemporalKind::Transformer,
        TemporalKind::Pyraformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalKind::Mlp => "mlp",
            TemporalKind::Rnn => "rnn",
            TemporalKind::Tcn => "tcn",
            TemporalKind::Transformer => "transformer",
            TemporalKind::Pyraformer => "pyraformer",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, TemporalKind::Transformer | TemporalKind::Pyraformer)
    }
}

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_LOCAL_WINDOW: usize = 4;
pub const DEFAULT_POOLING: [usize; 3] = [1, 2, 4];

fn default_layers() -> usize {
    DEFAULT_LAYERS
}

/// Kind-specific fields (`kernel`, `heads`, `pooling`, `local_window`) may only
/// be set for the kinds that use them; unset fields take the defaults above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    pub kind: TemporalKind,
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_window: Option<usize>,
}

impl TemporalConfig {
    pub fn new(kind: TemporalKind, hidden: usize) -> Self {
        Self {
            kind,
            hidden,
            layers: DEFAULT_LAYERS,
            dropout: 0.0,
            kernel: None,
            heads: None,
            pooling: None,
            local_window: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.kernel.unwrap_or(DEFAULT_KERNEL)
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(DEFAULT_HEADS)
    }

    pub fn pooling(&self) -> Vec<usize> {
        self.pooling.clone().unwrap_or_else(|| DEFAULT_POOLING.to_vec())
    }

    pub fn local_window(&self) -> usize {
        self.local_window.unwrap_or(DEFAULT_LOCAL_WINDOW)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kind;
        let misplaced = [
            ("kernel", self.kernel.is_some() && k != TemporalKind::Tcn),
            ("heads", self.heads.is_some() && !k.is_attention()),
            ("pooling", self.pooling.is_some() && k != TemporalKind::Pyraformer),
            (
                "local_window",
                self.local_window.is_some() && k != TemporalKind::Pyraformer,
            ),
        ];
        if let Some((field, _)) = misplaced.iter().find(|(_, bad)| *bad) {
            return Err(Error::Config(format!(
                "`{field}` does not apply to temporal kind `{}`",
                k.name()
            )));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden size and layer count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kernel() == 0 {
            return Err(Error::Config("kernel size must be >= 1".into()));
        }
        if k.is_attention() && (self.heads() == 0 || !self.hidden.is_multiple_of(self.heads())) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden,
                self.heads()
            )));
        }
        if k == TemporalKind::Pyraformer {
            let p = self.pooling();
            if p.is_empty() || p.contains(&0) || p.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0) {
                return Err(Error::Config(format!(
                    "pooling factors {p:?} must be increasing, each dividing the next"
                )));
            }
        }
        Ok(())
    }
}

fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1..].iter().product()])
}

fn check_input(g: &Graph, x: Var, len: usize, dim: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != len || s[2] != dim {
        return Err(shape_err(op, format!("expected [B, {len}, {dim}], got {s:?}")));
    }
    Ok(())
}

/// Flatten, project to `d_h`, then residual blocks `h + A2 relu(A1 h)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub input: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub dropout: f64,
    len: usize,
    dim: usize,
}

impl Mlp {
    fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        cfg: &TemporalConfig,
        len: usize,
        dim: usize,
    ) -> Self {
        let h = cfg.hidden;
        Self {
            input: Linear::new(store, rng, &scope.child("input"), len * dim, h),
            blocks: (0..cfg.layers)
                .map(|l| {
                    let s = scope.child(&format!("block{l}"));
                    (
                        Linear::new(store, rng, &s.child("fc1"), h, h),
                        Linear::new(store, rng, &s.child("fc2"), h, h),
                    )
                })
                .collect(),
            dropout: cfg.dropout,
            len,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        check_input(g, x, self.len, self.dim, "mlp")?;
        let flat = flatten(g, x)?;
        let mut h = self.input.forward(g, store, flat)?;
        for (fc1, fc2) in &self.blocks {
            let r = fc1.forward(g, store, h)?;
            let r = g.relu(r);
            let r = g.dropout(r, self.dropout);
            let r = fc2.forward(g, store, r)?;
            h = g.add(h, r)?;
        }
        Ok(h)
    }
}

/// Gated recurrent unit with gate order `[z, r, n]` and update
/// `h' = (1 - z) h + z n`, `n = tanh(W_n x + r * (U_n h + c_n) + b_n)`.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input: Linear,
    /// `[d_h, 3 d_h]`
    pub recurrent: String,
    /// `[3 d_h]`
    pub recurrent_bias: String,
    pub hidden: usize,
}

impl GruLayer {
    fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, scope: &Scope, inp: usize, hidden: usize) -> Self {
        let recurrent = scope.name("recurrent");
        let recurrent_bias = scope.name("recurrent_bias");
        store.insert_uniform(&recurrent, &[hidden, 3 * hidden], hidden, scope.partition, rng);
        store.insert_uniform(&recurrent_bias, &[3 * hidden], hidden, scope.partition, rng);
        Self {
            input: Linear::new(store, rng, &scope.child("input"), inp, 3 * hidden),
            recurrent,
            recurrent_bias,
            hidden,
        }
    }

    /// One cell application.
    pub fn cell(&self, g: &mut Graph, store: &ParameterStore, gx: Var, h: Var) -> Result<Var> {
        let d = self.hidden;
        let u = bind(g, store, &self.recurrent)?;
        let c = bind(g, store, &self.recurrent_bias)?;
        let gh = g.affine(h, u, c)?;
        let xz = g.slice(gx, 1, 0, d)?;
        let hz = g.slice(gh, 1, 0, d)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let xr = g.slice(gx, 1, d, 2 * d)?;
        let hr = g.slice(gh, 1, d, 2 * d)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let xn = g.slice(gx, 1, 2 * d, 3 * d)?;
        let hn = g.slice(gh, 1, 2 * d, 3 * d)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        let delta = g.sub(n, h)?;
        let step = g.mul(z, delta)?;
        g.add(h, step)
    }

    /// Runs the layer over `[B, L, d_in]`, returning every state `[B, L, d_h]`
    /// and the last one `[B, d_h]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let gx_all = self.input.forward(g, store, x)?;
        let mut h = g.constant(Tensor::zeros(vec![b, self.hidden]));
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let gx = g.slice(gx_all, 1, t, t + 1)?;
            let gx = g.reshape(gx, &[b, 3 * self.hidden])?;
            h = self.cell(g, store, gx, h)?;
            states.push(g.reshape(h, &[b, 1, self.hidden])?);
        }
        let seq = g.concat(&states, 1)?;
        Ok((seq, h))
    }
}

#[derive(Clone, Debug)]
pub struct Rnn {
    pub layers: Vec<GruLayer>,
    pub dropout: f64,
    len: usize,
    dim: usize,
}

impl Rnn {
    fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        cfg: &TemporalConfig,
        len: usize,
        dim: usize,
    ) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                let inp = if l == 0 { dim } else { cfg.hidden };
                GruLayer::new(store, rng, &scope.child(&format!("layer{l}")), inp, cfg.hidden)
            })
            .collect();
        Self {
            layers,
            dropout: cfg.dropout,
            len,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        check_input(g, x, self.len, self.dim, "rnn")?;
        let mut seq = x;
        let mut last = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                seq = g.dropout(seq, self.dropout);
            }
            (seq, last) = layer.forward(g, store, seq)?;
        }
        Ok(last)
    }
}

/// Block `l`: `x + relu(causal_conv(x, dilation 2^l))`, with a linear skip on
/// the first block when the input width differs from `d_h`.
#[derive(Clone, Debug)]
pub struct Tcn {
    pub convs: Vec<(String, String)>,
    pub skip: Option<Linear>,
    pub kernel: usize,
    pub dropout: f64,
    len: usize,
    dim: usize,
}

/// Steps visible to the last output of a TCN with one causal convolution per
/// block.
pub fn tcn_receptive_field(kernel: usize, layers: usize) -> usize {
    1 + (kernel - 1) * ((1usize << layers) - 1)
}

impl Tcn {
    fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        cfg: &TemporalConfig,
        len: usize,
        dim: usize,
    ) -> Self {
        let k = cfg.kernel();
        let convs = (0..cfg.layers)
            .map(|l| {
                let s = scope.child(&format!("block{l}"));
                let inp = if l == 0 { dim } else { cfg.hidden };
                let (w, b) = (s.name("weight"), s.name("bias"));
                store.insert_uniform(&w, &[k, inp, cfg.hidden], k * inp, s.partition, rng);
                store.insert_uniform(&b, &[cfg.hidden], k * inp, s.partition, rng);
                (w, b)
            })
            .collect();
        Self {
            convs,
            skip: (dim != cfg.hidden).then(|| Linear::new(store, rng, &scope.child("skip"), dim, cfg.hidden)),
            kernel: k,
            dropout: cfg.dropout,
            len,
            dim,
        }
    }

    /// Representation of every step, `[B, L, d_h]`.
    pub fn sequence(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        check_input(g, x, self.len, self.dim, "tcn")?;
        let mut h = x;
        for (l, (w, b)) in self.convs.iter().enumerate() {
            let wv = bind(g, store, w)?;
            let bv = bind(g, store, b)?;
            let c = g.conv1d(h, wv, bv, ConvSpec::causal(1 << l))?;
            let c = g.relu(c);
            let c = g.dropout(c, self.dropout);
            let res = match (&self.skip, l) {
                (Some(skip), 0) => skip.forward(g, store, h)?,
                _ => h,
            };
            h = g.add(res, c)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let seq = self.sequence(g, store, x)?;
        let s = g.shape(seq).to_vec();
        let last = g.slice(seq, 1, s[1] - 1, s[1])?;
        g.reshape(last, &[s[0], s[2]])
    }
}

/// Pre-norm encoder layer: `x + MHA(LN x)`, then `x + FF(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, scope: &Scope, cfg: &TemporalConfig) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            norm1: LayerNorm::new(store, &scope.child("norm1"), d),
            attention: MultiHeadAttention::new(store, rng, &scope.child("attention"), d, cfg.heads())?,
            norm2: LayerNorm::new(store, &scope.child("norm2"), d),
            ff: FeedForward::new(store, rng, &scope.child("ff"), d, 2 * d, cfg.dropout),
            dropout: cfg.dropout,
        })
    }

    /// Returns the layer output and its attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<(Var, Var)> {
        let n = self.norm1.forward(g, store, x)?;
        let att = self.attention.forward(g, store, n, mask)?;
        let a = g.dropout(att.output, self.dropout);
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, n)?;
        let f = g.dropout(f, self.dropout);
        Ok((g.add(x, f)?, att.weights))
    }
}

/// Input projection plus learned positional encoding.
#[derive(Clone, Debug)]
struct Embed {
    input: Linear,
    position: String,
}

impl Embed {
    fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        len: usize,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let position = scope.name("position");
        store.insert_uniform(&position, &[len, hidden], hidden, scope.partition, rng);
        Self {
            input: Linear::new(store, rng, &scope.child("input"), dim, hidden),
            position,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.input.forward(g, store, x)?;
        let p = bind(g, store, &self.position)?;
        g.add(h, p)
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    embed: Embed,
    pub layers: Vec<EncoderLayer>,
    pub output: Linear,
    len: usize,
    dim: usize,
}

impl Transformer {
    fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        cfg: &TemporalConfig,
        len: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            embed: Embed::new(store, rng, scope, len, dim, cfg.hidden),
            layers: (0..cfg.layers)
                .map(|l| EncoderLayer::new(store, rng, &scope.child(&format!("layer{l}")), cfg))
                .collect::<Result<_>>()?,
            output: Linear::new(store, rng, &scope.child("output"), len * cfg.hidden, cfg.hidden),
            len,
            dim,
        })
    }

    /// Hidden output and the attention weights of every layer.
    pub fn forward_with_weights(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<(Var, Vec<Var>)> {
        check_input(g, x, self.len, self.dim, "transformer")?;
        let mut h = self.embed.forward(g, store, x)?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, w) = layer.forward(g, store, h, None)?;
            h = out;
            weights.push(w);
        }
        let flat = flatten(g, h)?;
        Ok((self.output.forward(g, store, flat)?, weights))
    }
}

/// Multi-resolution attention: the sequence is mean-pooled at each factor,
/// all scales are stacked into one token set, and attention is restricted to
/// a local window within each scale plus parent/child links between adjacent
/// scales.
#[derive(Clone, Debug)]
pub struct Pyraformer {
    embed: Embed,
    pub layers: Vec<EncoderLayer>,
    pub output: Linear,
    /// `[M, L]` pooling matrix, transposed to `[L, M]`.
    pooling_t: Tensor,
    mask: Rc<Vec<bool>>,
    pub scales: Vec<usize>,
    len: usize,
    dim: usize,
}

/// Sizes of the scales kept for a sequence of `len` tokens (factors with no
/// complete group are dropped).
pub fn pyramid_scales(len: usize, factors: &[usize]) -> Vec<(usize, usize)> {
    factors
        .iter()
        .filter(|f| len / **f >= 1)
        .map(|f| (*f, len / f))
        .collect()
}

/// Attention mask over the stacked scales. Token `i` of a scale sees tokens
/// `j` of the same scale with `|i - j| <= w`, its parent in the next coarser
/// scale and its children in the next finer one. When a factor had to be
/// dropped the mask is full.
pub fn pyramid_mask(len: usize, factors: &[usize], w: usize) -> (usize, Vec<bool>) {
    let scales = pyramid_scales(len, factors);
    let m: usize = scales.iter().map(|(_, n)| n).sum();
    if scales.len() < factors.len() {
        return (m, vec![true; m * m]);
    }
    let offsets: Vec<usize> = scales
        .iter()
        .scan(0, |acc, (_, n)| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let mut mask = vec![false; m * m];
    for (s, (f, n)) in scales.iter().enumerate() {
        let o = offsets[s];
        for i in 0..*n {
            for j in i.saturating_sub(w)..(*n).min(i + w + 1) {
                mask[(o + i) * m + o + j] = true;
            }
            if let Some((fp, np)) = scales.get(s + 1) {
                let parent = i / (fp / f);
                if parent < *np {
                    let p = offsets[s + 1] + parent;
                    mask[(o + i) * m + p] = true;
                    mask[p * m + o + i] = true;
                }
            }
        }
    }
    (m, mask)
}

/// `[M, L]` averaging matrix for the stacked scales.
pub fn pyramid_pooling(len: usize, factors: &[usize]) -> Tensor {
    let scales = pyramid_scales(len, factors);
    let m: usize = scales.iter().map(|(_, n)| n).sum();
    let mut data = vec![0.0; m * len];
    let mut row = 0;
    for (f, n) in scales {
        for i in 0..n {
            for t in i * f..(i + 1) * f {
                data[row * len + t] = 1.0 / f as f64;
            }
            row += 1;
        }
    }
    Tensor::new(vec![m, len], data).expect("shape matches")
}

impl Pyraformer {
    fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        cfg: &TemporalConfig,
        len: usize,
        dim: usize,
    ) -> Result<Self> {
        let factors = cfg.pooling();
        let (m, mask) = pyramid_mask(len, &factors, cfg.local_window());
        let pooling = pyramid_pooling(len, &factors);
        let mut t = vec![0.0; m * len];
        for r in 0..m {
            for c in 0..len {
                t[c * m + r] = pooling.data()[r * len + c];
            }
        }
        Ok(Self {
            embed: Embed::new(store, rng, scope, len, dim, cfg.hidden),
            layers: (0..cfg.layers)
                .map(|l| EncoderLayer::new(store, rng, &scope.child(&format!("layer{l}")), cfg))
                .collect::<Result<_>>()?,
            output: Linear::new(store, rng, &scope.child("output"), m * cfg.hidden, cfg.hidden),
            pooling_t: Tensor::new(vec![len, m], t).expect("shape matches"),
            mask: Rc::new(mask),
            scales: pyramid_scales(len, &factors).into_iter().map(|(f, _)| f).collect(),
            len,
            dim,
        })
    }

    pub fn tokens(&self) -> usize {
        self.pooling_t.shape()[1]
    }

    pub fn forward_with_weights(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<(Var, Vec<Var>)> {
        check_input(g, x, self.len, self.dim, "pyraformer")?;
        let h = self.embed.forward(g, store, x)?;
        // [B, L, d] -> [B, d, L] x [L, M] -> [B, M, d]
        let ht = g.permute(h, &[0, 2, 1])?;
        let p = g.constant(self.pooling_t.clone());
        let pooled = g.matmul(ht, p)?;
        let mut h = g.permute(pooled, &[0, 2, 1])?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, w) = layer.forward(g, store, h, Some(self.mask.clone()))?;
            h = out;
            weights.push(w);
        }
        let flat = flatten(g, h)?;
        Ok((self.output.forward(g, store, flat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub enum TemporalBlock {
    Mlp(Mlp),
    Rnn(Rnn),
    Tcn(Tcn),
    Transformer(Transformer),
    Pyraformer(Pyraformer),
}

impl TemporalBlock {
    /// Builds the operator for sequences of `len` steps of width `dim`.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        cfg: &TemporalConfig,
        len: usize,
        dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if len == 0 || dim == 0 {
            return Err(Error::Config(
                "temporal input must have at least one step and channel".into(),
            ));
        }
        Ok(match cfg.kind {
            TemporalKind::Mlp => TemporalBlock::Mlp(Mlp::new(store, rng, scope, cfg, len, dim)),
            TemporalKind::Rnn => TemporalBlock::Rnn(Rnn::new(store, rng, scope, cfg, len, dim)),
            TemporalKind::Tcn => TemporalBlock::Tcn(Tcn::new(store, rng, scope, cfg, len, dim)),
            TemporalKind::Transformer => {
                TemporalBlock::Transformer(Transformer::new(store, rng, scope, cfg, len, dim)?)
            }
            TemporalKind::Pyraformer => TemporalBlock::Pyraformer(Pyraformer::new(store, rng, scope, cfg, len, dim)?),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        match self {
            TemporalBlock::Mlp(m) => m.forward(g, store, x),
            TemporalBlock::Rnn(m) => m.forward(g, store, x),
            TemporalBlock::Tcn(m) => m.forward(g, store, x),
            TemporalBlock::Transformer(m) => Ok(m.forward_with_weights(g, store, x)?.0),
            TemporalBlock::Pyraformer(m) => Ok(m.forward_with_weights(g, store, x)?.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(kind: TemporalKind, len: usize, dim: usize, hidden: usize) -> (ParameterStore, TemporalBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let mut cfg = TemporalConfig::new(kind, hidden);
        if kind.is_attention() {
            cfg.heads = Some(2);
        }
        let block = TemporalBlock::new(&mut store, &mut rng, &Scope::shared("t"), &cfg, len, dim).unwrap();
        (store, block)
    }

    #[test]
    fn every_kind_outputs_batch_by_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in TemporalKind::ALL {
            let (store, block) = build(kind, 8, 3, 6);
            let mut g = Graph::new(false, 0);
            let x = g.constant(random(&mut rng, &[4, 8, 3]));
            let h = block.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(h), &[4, 6], "{kind:?}");
        }
    }

    #[test]
    fn mlp_zero_residuals_leave_input_projection() {
        let (mut store, block) = build(TemporalKind::Mlp, 5, 2, 4);
        let TemporalBlock::Mlp(m) = &block else { unreachable!() };
        for (a, b) in &m.blocks {
            a.zero(&mut store);
            b.zero(&mut store);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(false, 0);
        let x = g.constant(random(&mut rng, &[3, 5, 2]));
        let out = block.forward(&mut g, &store, x).unwrap();
        let flat = g.reshape(x, &[3, 10]).unwrap();
        let proj = m.input.forward(&mut g, &store, flat).unwrap();
        assert_eq!(g.value(out), g.value(proj));
    }

    #[test]
    fn gru_with_zero_weights_outputs_zero() {
        let (mut store, block) = build(TemporalKind::Rnn, 6, 3, 4);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            store.get_mut(&n).unwrap().value.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(false, 0);
        let x = g.constant(random(&mut rng, &[2, 6, 3]));
        let out = block.forward(&mut g, &store, x).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_with_open_gates_is_tanh_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let d = 3;
        let layer = GruLayer::new(&mut store, &mut rng, &Scope::shared("gru"), 2, d);
        // saturate z and r through a huge bias on their input slices
        let bias = &mut store.get_mut("gru.input.bias").unwrap().value;
        bias.data_mut()[..2 * d].fill(1e3);
        let x = random(&mut rng, &[1, 2]);
        let h0 = random(&mut rng, &[1, d]);
        let mut g = Graph::new(false, 0);
        let xv = g.constant(x.clone());
        let gx = layer.input.forward(&mut g, &store, xv).unwrap();
        let hv = g.constant(h0.clone());
        let h1 = layer.cell(&mut g, &store, gx, hv).unwrap();
        let w = store.value("gru.input.weight").unwrap().data();
        let b = store.value("gru.input.bias").unwrap().data();
        let u = store.value("gru.recurrent").unwrap().data();
        let c = store.value("gru.recurrent_bias").unwrap().data();
        for j in 0..d {
            let col = 2 * d + j;
            let mut a = b[col] + c[col];
            a += (0..2).map(|i| x.data()[i] * w[i * 3 * d + col]).sum::<f64>();
            a += (0..d).map(|i| h0.data()[i] * u[i * 3 * d + col]).sum::<f64>();
            assert!((g.value(h1).data()[j] - a.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_rnn_is_one_cell() {
        let (store, block) = build(TemporalKind::Rnn, 1, 2, 3);
        let TemporalBlock::Rnn(r) = &block else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 1, 2]);
        let mut g = Graph::new(false, 0);
        let xv = g.constant(x);
        let out = block.forward(&mut g, &store, xv).unwrap();
        let mut h = xv;
        for layer in &r.layers {
            let flat = g.reshape(h, &[2, g.shape(h)[2]]).unwrap();
            let gx = layer.input.forward(&mut g, &store, flat).unwrap();
            let zero = g.constant(Tensor::zeros(vec![2, 3]));
            let next = layer.cell(&mut g, &store, gx, zero).unwrap();
            h = g.reshape(next, &[2, 1, 3]).unwrap();
        }
        let h = g.reshape(h, &[2, 3]).unwrap();
        assert_eq!(g.value(out), g.value(h));
    }

    #[test]
    fn receptive_field() {
        assert_eq!(tcn_receptive_field(3, 4), 31);
        assert_eq!(tcn_receptive_field(1, 4), 1);
    }

    #[test]
    fn tcn_is_causal() {
        let (store, block) = build(TemporalKind::Tcn, 12, 2, 4);
        let TemporalBlock::Tcn(tcn) = &block else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[1, 12, 2]);
        let mut g = Graph::new(false, 0);
        let xv = g.constant(x.clone());
        let base = tcn.sequence(&mut g, &store, xv).unwrap();
        let base = g.value(base).clone();
        for t in 0..12 {
            let mut y = x.clone();
            y.data_mut()[t * 2] += 3.0;
            let yv = g.constant(y);
            let out = tcn.sequence(&mut g, &store, yv).unwrap();
            let out = g.value(out);
            assert_eq!(out.data()[..t * 4], base.data()[..t * 4]);
            assert_ne!(out.data()[t * 4..], base.data()[t * 4..]);
        }
    }

    #[test]
    fn one_token_attention_is_value_path() {
        let (store, block) = build(TemporalKind::Transformer, 1, 4, 4);
        let TemporalBlock::Transformer(tf) = &block else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(false, 0);
        let x = g.constant(random(&mut rng, &[2, 1, 4]));
        let (_, weights) = tf.forward_with_weights(&mut g, &store, x).unwrap();
        for w in weights {
            assert!(g.value(w).data().iter().all(|v| *v == 1.0));
        }
        // with a single key the attention output is O(V(LN x))
        let layer = &tf.layers[0];
        let n = layer.norm1.forward(&mut g, &store, x).unwrap();
        let att = layer.attention.forward(&mut g, &store, n, None).unwrap();
        let v = layer.attention.value.forward(&mut g, &store, n).unwrap();
        let o = layer.attention.output.forward(&mut g, &store, v).unwrap();
        assert!(g.value(att.output).max_abs_diff(g.value(o)) < 1e-12);
    }

    #[test]
    fn pooling_matrix_averages() {
        let p = pyramid_pooling(2, &[2]);
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = pyramid_pooling(5, &[1, 2, 4]);
        assert_eq!(p.shape(), &[5 + 2 + 1, 5]);
        let x = [1.0, 3.0, 5.0, 7.0, 100.0];
        let pooled: Vec<f64> = (0..8)
            .map(|r| (0..5).map(|c| p.data()[r * 5 + c] * x[c]).sum())
            .collect();
        assert_eq!(&pooled[5..], &[2.0, 6.0, 4.0]);
    }

    #[test]
    fn pyramid_mask_matches_brute_force() {
        let (l, w) = (8, 1);
        let (m, mask) = pyramid_mask(l, &[1, 2, 4], w);
        assert_eq!(m, 8 + 4 + 2);
        // enumerate (scale, index) for every token and decide edges directly
        let tokens: Vec<(usize, usize)> = (0..8)
            .map(|i| (0, i))
            .chain((0..4).map(|i| (1, i)))
            .chain((0..2).map(|i| (2, i)))
            .collect();
        let factor = [1usize, 2, 4];
        for (a, (sa, ia)) in tokens.iter().enumerate() {
            for (b, (sb, ib)) in tokens.iter().enumerate() {
                let same = sa == sb && ia.abs_diff(*ib) <= w;
                let covers = |(s1, i1): (usize, usize), (s2, i2): (usize, usize)| {
                    // s2 is the parent scale of s1 and token i2 covers i1
                    s2 == s1 + 1 && i1 * factor[s1] / factor[s2] == i2
                };
                let linked = covers((*sa, *ia), (*sb, *ib)) || covers((*sb, *ib), (*sa, *ia));
                assert_eq!(mask[a * m + b], same || linked, "{a} {b}");
            }
        }
    }

    #[test]
    fn unit_pooling_is_windowed_attention() {
        let (m, mask) = pyramid_mask(6, &[1], 2);
        assert_eq!(m, 6);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(mask[i * 6 + j], i.abs_diff(j) <= 2);
            }
        }
    }

    #[test]
    fn short_sequence_falls_back_to_full_attention() {
        let (m, mask) = pyramid_mask(3, &[1, 2, 4], 1);
        assert_eq!(m, 3 + 1);
        assert!(mask.iter().all(|v| *v));
    }

    #[test]
    fn misplaced_fields_rejected() {
        let mut cfg = TemporalConfig::new(TemporalKind::Mlp, 8);
        cfg.kernel = Some(3);
        assert!(cfg.validate().is_err());
        let mut cfg = TemporalConfig::new(TemporalKind::Transformer, 10);
        cfg.heads = Some(4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in TemporalKind::ALL {
            let (store, block) = build(kind, 8, 2, 4);
            let x = random(&mut rng, &[3, 8, 2]);
            let mut y = x.clone();
            for v in &mut y.data_mut()[16..32] {
                *v += 1.0;
            }
            let mut g = Graph::new(false, 0);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let a = block.forward(&mut g, &store, xv).unwrap();
            let b = block.forward(&mut g, &store, yv).unwrap();
            let (a, b) = (g.value(a).data(), g.value(b).data());
            assert_eq!(a[..4], b[..4], "{kind:?}");
            assert_eq!(a[8..], b[8..], "{kind:?}");
        }
    }
}
