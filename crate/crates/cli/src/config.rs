//! TOML run configuration with nested sections. Every value has a default;
//! command-line flags win over file values.

use std::path::Path;

use anyhow::{Context, Result};
use mlmatch_core::checkpoint::DataConfig;
use mlmatch_core::encoder::EncoderConfig;
use mlmatch_core::melody::MELODY_DIM;
use mlmatch_core::phonetics::SYLPHONE_DIM;
use mlmatch_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub retrieve: RetrieveSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub corpus: Option<String>,
    pub cmudict: Option<String>,
    pub lines_per_segment: usize,
    pub rare_min_count: usize,
    pub melody_line_range: (usize, usize),
    pub lyrics_line_range: (usize, usize),
    pub split_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        Self {
            corpus: None,
            cmudict: None,
            lines_per_segment: d.lines_per_segment,
            rare_min_count: d.rare_min_count,
            melody_line_range: d.melody_line_range,
            lyrics_line_range: d.lyrics_line_range,
            split_ratio: d.split_ratio,
        }
    }
}

impl DataSection {
    pub fn to_data_config(&self) -> DataConfig {
        DataConfig {
            lines_per_segment: self.lines_per_segment,
            rare_min_count: self.rare_min_count,
            melody_line_range: self.melody_line_range,
            lyrics_line_range: self.lyrics_line_range,
            split_ratio: self.split_ratio,
        }
    }
}

/// Encoder architecture shared by both sides (input widths are fixed by
/// the feature definitions). `profile` selects the desk-scale or the
/// reference architecture; explicit fields override the profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub profile: String,
    pub model_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub feedforward_dim: Option<usize>,
    pub max_len: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            profile: "desk".into(),
            model_dim: None,
            layers: None,
            heads: None,
            feedforward_dim: None,
            max_len: None,
        }
    }
}

impl EncoderSection {
    pub fn encoder_configs(&self) -> Result<(EncoderConfig, EncoderConfig)> {
        let base = match self.profile.as_str() {
            "desk" => EncoderConfig::desk_scale(0),
            "reference" => EncoderConfig::reference(0),
            other => anyhow::bail!("unknown encoder profile {other:?} (desk|reference)"),
        };
        let apply = |input_dim: usize| EncoderConfig {
            input_dim,
            model_dim: self.model_dim.unwrap_or(base.model_dim),
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            feedforward_dim: self.feedforward_dim.unwrap_or(base.feedforward_dim),
            max_len: self.max_len.unwrap_or(base.max_len),
            use_positional: true,
        };
        Ok((apply(MELODY_DIM), apply(SYLPHONE_DIM)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            gamma: t.gamma,
            alpha: t.alpha,
            tau: t.tau,
            epsilon: t.epsilon,
            base_lr: t.base_lr,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            grad_clip_norm: t.grad_clip_norm,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            gamma: self.gamma,
            alpha: self.alpha,
            tau: self.tau,
            epsilon: self.epsilon,
            base_lr: self.base_lr,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            grad_clip_norm: self.grad_clip_norm,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieveSection {
    pub alpha: Option<f64>,
    pub topk: usize,
    pub keep_fraction: f64,
    pub direction: String,
}

impl Default for RetrieveSection {
    fn default() -> Self {
        Self {
            alpha: None,
            topk: 10,
            keep_fraction: 0.5,
            direction: "melody2lyrics".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub method: String,
    pub with_plain: bool,
    pub top_matches: usize,
    pub keep_fraction: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            method: "mlm".into(),
            with_plain: false,
            top_matches: 5,
            keep_fraction: 0.5,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}
