use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::CovariateSet;
use crate::error::{Error, Result};
use crate::linear::DEFAULT_MA_KERNEL;
use crate::preprocess::{patch_count, EncodingMode};
use crate::spatial::{SpatialConfig, SpatialKind, DEFAULT_SPATIAL_HEADS};
use crate::temporal::{TemporalConfig, TemporalKind, DEFAULT_LAYERS};

/// How parameters relate to series identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// All series stacked as the channels of one multivariate input.
    Joint,
    /// One parameter set shared by every series.
    Global,
    /// Shared backbone plus a per-series embedding.
    Hybrid,
    /// A separate copy of every parameter per series.
    Local,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Global => "global",
            Mode::Hybrid => "hybrid",
            Mode::Local => "local",
        }
    }

    /// Parameters indexed by series identity.
    pub fn is_transductive(self) -> bool {
        matches!(self, Mode::Hybrid | Mode::Local)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Preprocess, temporal, spatial, linear decoder.
    #[default]
    Reference,
    DLinear,
    Ridge,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Reference => "reference",
            Family::DLinear => "dlinear",
            Family::Ridge => "ridge",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    #[default]
    Linear,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    DEFAULT_LAYERS
}
fn default_temporal() -> TemporalKind {
    TemporalKind::Mlp
}

pub const DEFAULT_PATCH_LEN: usize = 16;
pub const DEFAULT_PATCH_STRIDE: usize = 8;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1.0;

/// Declarative model description, read from a flat TOML file. Unknown keys
/// are rejected, and fields that only apply to one kind or family may only be
/// set for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub family: Family,
    pub mode: Mode,
    #[serde(default)]
    pub d_emb: usize,
    pub n_series: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub window: usize,
    pub horizon: usize,

    #[serde(default = "yes")]
    pub scaler: bool,
    #[serde(default = "yes")]
    pub revin: bool,
    #[serde(default = "yes")]
    pub revin_affine: bool,
    #[serde(default)]
    pub covariates: CovariateSet,

    #[serde(default = "default_temporal")]
    pub temporal: TemporalKind,
    #[serde(default = "default_hidden")]
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
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<EncodingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_stride: Option<usize>,

    #[serde(default)]
    pub spatial: SpatialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_heads: Option<usize>,

    #[serde(default)]
    pub decoder: Decoder,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ma_kernel: Option<usize>,

    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Global reference model with per-step encoding and defaults elsewhere.
    pub fn reference(temporal: TemporalKind, n_series: usize, window: usize, horizon: usize, hidden: usize) -> Self {
        Self {
            name: None,
            family: Family::Reference,
            mode: Mode::Global,
            d_emb: 0,
            n_series,
            channels: 1,
            window,
            horizon,
            scaler: true,
            revin: true,
            revin_affine: true,
            covariates: CovariateSet::None,
            temporal,
            hidden,
            layers: DEFAULT_LAYERS,
            dropout: 0.0,
            kernel: None,
            heads: None,
            pooling: None,
            local_window: None,
            encoding: None,
            patch_len: None,
            patch_stride: None,
            spatial: SpatialKind::None,
            spatial_heads: None,
            decoder: Decoder::Linear,
            lambda: None,
            intercept: None,
            ma_kernel: None,
            seed: 0,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable hash of every field.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| match self.family {
            Family::Reference => format!("{}-{}-{}", self.mode.name(), self.temporal.name(), self.spatial.name()),
            f => format!("{}-{}", self.mode.name(), f.name()),
        })
    }

    pub fn encoding_mode(&self) -> EncodingMode {
        self.encoding.unwrap_or(if self.temporal.is_attention() {
            EncodingMode::Patched
        } else {
            EncodingMode::PerStep
        })
    }

    pub fn patch(&self) -> (usize, usize) {
        (
            self.patch_len.unwrap_or(DEFAULT_PATCH_LEN),
            self.patch_stride.unwrap_or(DEFAULT_PATCH_STRIDE),
        )
    }

    /// Channels seen by the model: `N * d_x` for joint mode.
    pub fn model_channels(&self) -> usize {
        if self.mode == Mode::Joint {
            self.n_series * self.channels
        } else {
            self.channels
        }
    }

    /// Length of the sequence entering the temporal block.
    pub fn sequence_len(&self) -> Result<usize> {
        match self.encoding_mode() {
            EncodingMode::PerStep => Ok(self.window),
            EncodingMode::Patched => {
                let (p, s) = self.patch();
                patch_count(self.window, p, s)
            }
        }
    }

    pub fn temporal_config(&self) -> TemporalConfig {
        TemporalConfig {
            kind: self.temporal,
            hidden: self.hidden,
            layers: self.layers,
            dropout: self.dropout,
            kernel: self.kernel,
            heads: self.heads,
            pooling: self.pooling.clone(),
            local_window: self.local_window,
        }
    }

    pub fn spatial_config(&self) -> SpatialConfig {
        SpatialConfig {
            kind: self.spatial,
            heads: self.spatial_heads.unwrap_or(DEFAULT_SPATIAL_HEADS),
            hidden: self.hidden,
            dropout: self.dropout,
        }
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.lambda.unwrap_or(DEFAULT_RIDGE_LAMBDA)
    }

    pub fn ma_kernel(&self) -> usize {
        self.ma_kernel.unwrap_or(DEFAULT_MA_KERNEL)
    }

    /// Checks every invariant and names the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_series == 0 || self.channels == 0 || self.window == 0 || self.horizon == 0 {
            return fail("n_series, channels, window and horizon must all be >= 1".into());
        }
        let neural = self.family != Family::Ridge;
        if neural && (self.mode == Mode::Hybrid) != (self.d_emb > 0) {
            return fail(format!(
                "hybrid mode requires d_emb > 0 and d_emb > 0 requires hybrid mode (mode = {}, d_emb = {})",
                self.mode.name(),
                self.d_emb
            ));
        }
        if !neural && self.d_emb > 0 {
            return fail("ridge hybrid mode uses one-hot series columns; d_emb does not apply".into());
        }
        if self.mode == Mode::Joint && self.family != Family::Reference {
            return fail(format!(
                "joint mode is only defined for the reference family, not {}",
                self.family.name()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let reference_only = [
            ("kernel", self.kernel.is_some()),
            ("heads", self.heads.is_some()),
            ("pooling", self.pooling.is_some()),
            ("local_window", self.local_window.is_some()),
            ("encoding", self.encoding.is_some()),
            ("patch_len", self.patch_len.is_some()),
            ("patch_stride", self.patch_stride.is_some()),
            ("spatial_heads", self.spatial_heads.is_some()),
        ];
        match self.family {
            Family::Reference => {
                if self.lambda.is_some() || self.intercept.is_some() || self.ma_kernel.is_some() {
                    return fail("lambda, intercept and ma_kernel only apply to the linear families".into());
                }
                self.temporal_config().validate()?;
                if self.encoding_mode() == EncodingMode::PerStep
                    && (self.patch_len.is_some() || self.patch_stride.is_some())
                {
                    return fail("patch_len and patch_stride only apply to patched encoding".into());
                }
                self.sequence_len()?;
                if self.spatial_heads.is_some() && self.spatial != SpatialKind::Attention {
                    return fail("spatial_heads only applies to spatial attention".into());
                }
                if self.spatial == SpatialKind::Attention {
                    let h = self.spatial_config().heads;
                    if h == 0 || !self.hidden.is_multiple_of(h) {
                        return fail(format!(
                            "hidden size {} is not divisible by {h} spatial heads",
                            self.hidden
                        ));
                    }
                }
                if self.spatial != SpatialKind::None && matches!(self.mode, Mode::Local | Mode::Joint) {
                    return fail(format!(
                        "spatial processing needs a shared model over separate series; {} mode has none",
                        self.mode.name()
                    ));
                }
            }
            Family::DLinear | Family::Ridge => {
                if let Some((field, _)) = reference_only.iter().find(|(_, set)| *set) {
                    return fail(format!("`{field}` does not apply to the {} family", self.family.name()));
                }
                if self.spatial != SpatialKind::None {
                    return fail("linear families have no spatial block".into());
                }
                if self.family == Family::Ridge {
                    if self.ma_kernel.is_some() {
                        return fail("ma_kernel only applies to dlinear".into());
                    }
                    if self.revin {
                        return fail("ridge is fit in closed form and does not support RevIN".into());
                    }
                    if self.covariates != CovariateSet::None {
                        return fail("ridge does not use covariates".into());
                    }
                    if self.ridge_lambda() < 0.0 {
                        return fail("lambda must be >= 0".into());
                    }
                } else {
                    if self.lambda.is_some() || self.intercept.is_some() {
                        return fail("lambda and intercept only apply to ridge".into());
                    }
                    if self.covariates != CovariateSet::None {
                        return fail("dlinear does not use covariates".into());
                    }
                    crate::linear::moving_average_matrix(self.window, self.ma_kernel())?;
                }
            }
        }
        Ok(())
    }
}
