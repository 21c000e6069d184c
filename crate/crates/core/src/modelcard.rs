//! Forecasting model cards: a short structured summary of a model along its
//! four design dimensions, derived mechanically from a [`ModelConfig`].
//!
//! Cards render to Markdown with a TOML front-matter block (`+++`) that
//! mirrors every field, so [`parse`] recovers the card exactly.

use serde::{Deserialize, Serialize};

use crate::assembly::{build, Family, Mode, ModelConfig};
use crate::dataio::CovariateSet;
use crate::error::{Error, Result};
use crate::preprocess::EncodingMode;
use crate::spatial::SpatialKind;
use crate::temporal::TemporalKind;

pub const NOT_APPLICABLE: &str = "not applicable";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastingModelCard {
    pub window_length: String,
    pub transductive_or_inductive: String,
    pub masking: String,
    pub global_local_hybrid: String,
    pub hybrid_parameters: String,
    pub scaling: String,
    pub covariates: String,
    pub temporal_modules: String,
    pub complexity_steps: String,
    pub spatial_modules: String,
    pub complexity_nodes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

/// A field that is missing or disagrees with the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn mode_text(mode: Mode) -> &'static str {
    match mode {
        Mode::Joint => "multivariate model over all series as one input",
        Mode::Global => "global model",
        Mode::Hybrid => "hybrid model",
        Mode::Local => "local model",
    }
}

fn temporal_text(cfg: &ModelConfig) -> (String, String) {
    match cfg.family {
        Family::DLinear => (
            "moving-average decomposition with linear trend and seasonal maps".into(),
            "linear in window length".into(),
        ),
        Family::Ridge => (
            "linear map over the window fit in closed form (ridge)".into(),
            "linear in window length".into(),
        ),
        Family::Reference => {
            let patched = cfg.encoding_mode() == EncodingMode::Patched;
            let prefix = if patched {
                "convolutional encoding followed by "
            } else {
                ""
            };
            let module = match (cfg.temporal, patched) {
                (TemporalKind::Mlp, _) => "MLP over the flattened window",
                (TemporalKind::Rnn, _) => "GRU layers",
                (TemporalKind::Tcn, _) => "dilated causal convolutions",
                (TemporalKind::Transformer, true) => "patching-based Transformer layers",
                (TemporalKind::Transformer, false) => "Transformer layers",
                (TemporalKind::Pyraformer, _) => "pyramidal attention layers",
            };
            let unit = if patched { "patches" } else { "steps" };
            let complexity = match cfg.temporal {
                TemporalKind::Mlp => "linear in window length".to_string(),
                TemporalKind::Rnn | TemporalKind::Tcn => "linear in steps".to_string(),
                TemporalKind::Transformer => format!(
                    "the time and space complexity scales quadratically with the number of {unit} (self-attention)"
                ),
                TemporalKind::Pyraformer => format!("linear in the number of {unit} (pyramidal attention)"),
            };
            (format!("{prefix}{module}"), complexity)
        }
    }
}

fn spatial_text(cfg: &ModelConfig) -> (String, String) {
    if cfg.mode == Mode::Joint {
        return (
            "series mixed as input channels of one model".into(),
            "linear in series count (input width)".into(),
        );
    }
    match cfg.spatial {
        SpatialKind::None => (NOT_APPLICABLE.into(), NOT_APPLICABLE.into()),
        SpatialKind::Attention => (
            "multi-head attention across series after the temporal block".into(),
            "quadratic in series count".into(),
        ),
        SpatialKind::Mlp => (
            "per-series MLP after the temporal block (no cross-series mixing)".into(),
            "linear in series count".into(),
        ),
    }
}

fn hybrid_text(cfg: &ModelConfig, per_series: &[String]) -> String {
    match (cfg.mode, cfg.family) {
        (Mode::Global | Mode::Joint, _) => NOT_APPLICABLE.into(),
        (Mode::Local, _) => format!("all parameters (one full copy per series, N = {})", cfg.n_series),
        (Mode::Hybrid, Family::Ridge) => format!("one-hot series columns (N×H): onehot with N = {}", cfg.n_series),
        (Mode::Hybrid, _) => format!(
            "series embedding table (N×{}): {} with N = {}",
            cfg.d_emb,
            per_series.join(", "),
            cfg.n_series
        ),
    }
}

fn scaling_text(cfg: &ModelConfig) -> String {
    match (cfg.scaler, cfg.revin) {
        (true, true) => "standard normalization (z-score) applied per series and in-batch RevIN normalization".into(),
        (true, false) => "standard normalization (z-score) applied per series".into(),
        (false, true) => "in-batch RevIN normalization".into(),
        (false, false) => "none".into(),
    }
}

fn covariates_text(cfg: &ModelConfig) -> String {
    match cfg.covariates {
        CovariateSet::None => "not used".into(),
        CovariateSet::Calendar => "calendar features for past and future steps".into(),
    }
}

/// Maps a valid config to its card.
pub fn derive_card(cfg: &ModelConfig) -> Result<ForecastingModelCard> {
    let model = build(cfg)?;
    let per_series = model.per_series_parameters();
    let (temporal_modules, complexity_steps) = temporal_text(cfg);
    let (spatial_modules, complexity_nodes) = spatial_text(cfg);
    Ok(ForecastingModelCard {
        window_length: format!("fixed lookback window of {}", cfg.window),
        transductive_or_inductive: if cfg.mode.is_transductive() {
            "transductive"
        } else {
            "inductive"
        }
        .into(),
        masking: "not applied/needed".into(),
        global_local_hybrid: mode_text(cfg.mode).into(),
        hybrid_parameters: hybrid_text(cfg, &per_series),
        scaling: scaling_text(cfg),
        covariates: covariates_text(cfg),
        temporal_modules,
        complexity_steps,
        spatial_modules,
        complexity_nodes,
        notes: None,
    })
}

const SECTIONS: [(&str, &[(&str, &str)]); 5] = [
    (
        "Model setting",
        &[
            ("window_length", "Window length"),
            ("transductive_or_inductive", "Transductive or inductive (cold start)"),
            ("masking", "Masking"),
        ],
    ),
    (
        "D1. Model configuration",
        &[
            ("global_local_hybrid", "Global/local/hybrid"),
            ("hybrid_parameters", "Hybrid parameters (non-shared)"),
        ],
    ),
    (
        "D2. Preprocessing and exogenous variables",
        &[("scaling", "Scaling"), ("covariates", "Covariates/exogenous variables")],
    ),
    (
        "D3. Temporal processing",
        &[
            ("temporal_modules", "Temporal modules"),
            ("complexity_steps", "Complexity scaling with steps"),
        ],
    ),
    (
        "D4. Spatial processing",
        &[
            ("spatial_modules", "Spatial modules"),
            ("complexity_nodes", "Complexity scaling with nodes"),
        ],
    ),
];

impl ForecastingModelCard {
    fn field(&self, key: &str) -> &str {
        match key {
            "window_length" => &self.window_length,
            "transductive_or_inductive" => &self.transductive_or_inductive,
            "masking" => &self.masking,
            "global_local_hybrid" => &self.global_local_hybrid,
            "hybrid_parameters" => &self.hybrid_parameters,
            "scaling" => &self.scaling,
            "covariates" => &self.covariates,
            "temporal_modules" => &self.temporal_modules,
            "complexity_steps" => &self.complexity_steps,
            "spatial_modules" => &self.spatial_modules,
            "complexity_nodes" => &self.complexity_nodes,
            _ => unreachable!("unknown card field {key}"),
        }
    }

    /// Every `(field, label, value)` in rendering order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, &str)> {
        SECTIONS
            .iter()
            .flat_map(|(_, fields)| fields.iter().map(|(k, label)| (*k, *label, self.field(k))))
            .collect()
    }
}

/// Markdown document with a TOML front-matter block.
pub fn render(card: &ForecastingModelCard) -> String {
    let front = toml::to_string(card).expect("card serializes");
    let mut out = format!("+++\n{front}+++\n\n# Forecasting Model Card\n");
    for (title, fields) in SECTIONS {
        out.push_str(&format!("\n**{title}**\n\n"));
        for (key, label) in fields {
            out.push_str(&format!("- *{label}*: {}\n", card.field(key)));
        }
    }
    if let Some(notes) = card.notes.as_deref().filter(|n| !n.trim().is_empty()) {
        out.push_str(&format!("\n**Notes**\n\n{notes}\n"));
    }
    out
}

/// Reads the card back from the front-matter block.
pub fn parse(doc: &str) -> Result<ForecastingModelCard> {
    let rest = doc
        .strip_prefix("+++\n")
        .ok_or_else(|| Error::Card("document does not start with a `+++` front-matter block".into()))?;
    let end = rest
        .find("\n+++")
        .ok_or_else(|| Error::Card("front-matter block is not closed".into()))?;
    toml::from_str(&rest[..end + 1]).map_err(|e| Error::Card(format!("front matter: {e}")))
}

/// Field completeness plus card-config consistency. An empty list means the
/// card passes.
pub fn validate(card: &ForecastingModelCard, cfg: &ModelConfig) -> Result<Vec<Violation>> {
    let mut out = Vec::new();
    let mut flag = |field: &'static str, message: String| out.push(Violation { field, message });
    for (key, label, value) in card.entries() {
        if value.trim().is_empty() {
            let field = SECTIONS
                .iter()
                .flat_map(|(_, f)| f.iter())
                .find(|(k, _)| *k == key)
                .map(|(k, _)| *k)
                .unwrap_or("unknown");
            flag(field, format!("`{label}` is empty"));
        }
    }
    let model = build(cfg)?;
    let per_series = model.per_series_parameters();
    let na = |v: &str| v.trim().eq_ignore_ascii_case(NOT_APPLICABLE);

    if !card.window_length.contains(&cfg.window.to_string()) {
        flag("window_length", format!("does not state the window of {}", cfg.window));
    }
    let expected = if cfg.mode.is_transductive() {
        "transductive"
    } else {
        "inductive"
    };
    if card.transductive_or_inductive.trim() != expected {
        flag(
            "transductive_or_inductive",
            format!(
                "card says `{}` but the {} config is {expected}",
                card.transductive_or_inductive,
                cfg.mode.name()
            ),
        );
    }
    if card.global_local_hybrid.trim() != mode_text(cfg.mode) {
        flag(
            "global_local_hybrid",
            format!(
                "card says `{}` but the config is `{}`",
                card.global_local_hybrid,
                mode_text(cfg.mode)
            ),
        );
    }
    match cfg.mode {
        Mode::Global | Mode::Joint => {
            if !per_series.is_empty() {
                flag(
                    "hybrid_parameters",
                    format!("model has per-series parameters {per_series:?} but is described as shared"),
                );
            } else if !na(&card.hybrid_parameters) {
                flag(
                    "hybrid_parameters",
                    "a fully shared model has no non-shared parameters".into(),
                );
            }
        }
        Mode::Hybrid => {
            if na(&card.hybrid_parameters) {
                flag(
                    "hybrid_parameters",
                    "hybrid model must list its non-shared parameters".into(),
                );
            } else if let Some(missing) = per_series.iter().find(|p| !card.hybrid_parameters.contains(p.as_str())) {
                flag(
                    "hybrid_parameters",
                    format!("per-series parameter `{missing}` is not listed"),
                );
            }
        }
        Mode::Local => {
            if na(&card.hybrid_parameters) {
                flag("hybrid_parameters", "local model has only per-series parameters".into());
            }
        }
    }
    let covariates_used = !card.covariates.trim().eq_ignore_ascii_case("not used");
    if covariates_used != (cfg.covariates != CovariateSet::None) {
        flag(
            "covariates",
            format!(
                "card says `{}` but the config uses {:?}",
                card.covariates, cfg.covariates
            ),
        );
    }
    let revin_claimed = card.scaling.contains("RevIN");
    if revin_claimed != cfg.revin {
        flag(
            "scaling",
            format!("RevIN is {} in the config", if cfg.revin { "on" } else { "off" }),
        );
    }
    let spatial_none = cfg.spatial == SpatialKind::None && cfg.mode != Mode::Joint;
    for (field, value) in [
        ("spatial_modules", &card.spatial_modules),
        ("complexity_nodes", &card.complexity_nodes),
    ] {
        if na(value) != spatial_none {
            flag(
                field,
                if spatial_none {
                    "config has no spatial processing".into()
                } else {
                    "`not applicable` but the config processes the series dimension".into()
                },
            );
        }
    }
    for (field, value) in [
        ("temporal_modules", &card.temporal_modules),
        ("complexity_steps", &card.complexity_steps),
    ] {
        if na(value) {
            flag(field, "every model processes the temporal dimension".into());
        }
    }
    Ok(out)
}
