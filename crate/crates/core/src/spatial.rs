//! Operators across the series axis, applied once after the temporal block.
//!
//! Inputs are `[G * N, d_h]` hidden vectors grouped by window: rows
//! `g * N .. (g + 1) * N` hold the `N` series of window `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{AttentionOutput, FeedForward, MultiHeadAttention, Scope};
use crate::autodiff::{Graph, ParameterStore, Var};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_SPATIAL_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    #[default]
    None,
    Attention,
    Mlp,
}

impl SpatialKind {
    pub const ALL: [SpatialKind; 3] = [SpatialKind::None, SpatialKind::Attention, SpatialKind::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            SpatialKind::None => "none",
            SpatialKind::Attention => "attention",
            SpatialKind::Mlp => "mlp",
        }
    }

    /// Whether batches must hold every series of a window together.
    pub fn needs_grouping(self) -> bool {
        self == SpatialKind::Attention
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialConfig {
    pub kind: SpatialKind,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum SpatialBlock {
    None,
    /// `a = h + Attn(h)`, then `a + FF(a)`.
    Attention {
        attention: MultiHeadAttention,
        ff: FeedForward,
    },
    /// `h + FF(h)`, row by row.
    Mlp {
        ff: FeedForward,
    },
}

impl SpatialBlock {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, scope: &Scope, cfg: &SpatialConfig) -> Result<Self> {
        let d = cfg.hidden;
        Ok(match cfg.kind {
            SpatialKind::None => SpatialBlock::None,
            SpatialKind::Attention => SpatialBlock::Attention {
                attention: MultiHeadAttention::new(store, rng, &scope.child("attention"), d, cfg.heads)?,
                ff: FeedForward::new(store, rng, &scope.child("ff"), d, 2 * d, cfg.dropout),
            },
            SpatialKind::Mlp => SpatialBlock::Mlp {
                ff: FeedForward::new(store, rng, &scope.child("ff"), d, 2 * d, cfg.dropout),
            },
        })
    }

    pub fn kind(&self) -> SpatialKind {
        match self {
            SpatialBlock::None => SpatialKind::None,
            SpatialBlock::Attention { .. } => SpatialKind::Attention,
            SpatialBlock::Mlp { .. } => SpatialKind::Mlp,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, h: Var, n_series: usize) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, h, n_series)?.0)
    }

    /// Also returns the `[G, heads, N, N]` attention weights for the
    /// attention kind.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        h: Var,
        n_series: usize,
    ) -> Result<(Var, Option<Var>)> {
        match self {
            SpatialBlock::None => Ok((h, None)),
            SpatialBlock::Mlp { ff } => {
                let f = ff.forward(g, store, h)?;
                Ok((g.add(h, f)?, None))
            }
            SpatialBlock::Attention { attention, ff } => {
                if n_series == 0 {
                    return Err(Error::InvalidArgument(
                        "spatial attention needs at least one series".into(),
                    ));
                }
                let s = g.shape(h).to_vec();
                if s.len() != 2 || !s[0].is_multiple_of(n_series) {
                    return Err(shape_err(
                        "spatial attention",
                        format!("{s:?} is not a whole number of {n_series}-series groups"),
                    ));
                }
                let groups = g.reshape(h, &[s[0] / n_series, n_series, s[1]])?;
                let AttentionOutput { output, weights } = attention.forward(g, store, groups, None)?;
                let a = g.add(groups, output)?;
                let f = ff.forward(g, store, a)?;
                let out = g.add(a, f)?;
                Ok((g.reshape(out, &s)?, Some(weights)))
            }
        }
    }
}
