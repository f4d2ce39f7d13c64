//! Versioned model checkpoint: encoder configs, training and data configs,
//! quantizer stats, vocabulary hashes, and the flat parameter buffer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ParameterSet};
use crate::error::{CoreError, Result};
use crate::melody::QuantizerStats;
use crate::scalar::Scalar;
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Corpus-processing parameters frozen alongside the model so evaluation
/// and retrieval segment their inputs the same way training did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub lines_per_segment: usize,
    pub rare_min_count: usize,
    pub melody_line_range: (usize, usize),
    pub lyrics_line_range: (usize, usize),
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            lines_per_segment: 4,
            rare_min_count: 10,
            melody_line_range: crate::corpus::MELODY_LINE_RANGE,
            lyrics_line_range: crate::corpus::LYRICS_LINE_RANGE,
            split_ratio: 0.8,
        }
    }
}

/// Hashes of the vocabulary resources a model was trained with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VocabHashes {
    pub cmudict_sha256: String,
    pub stopwords_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub melody_encoder: EncoderConfig,
    pub lyrics_encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub quantizer: QuantizerStats,
    pub hashes: VocabHashes,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)
            .map_err(|e| CoreError::Checkpoint(format!("serialize failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| CoreError::Checkpoint(format!("parse failed: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.params.iter().any(|p| !p.is_finite()) {
            return Err(CoreError::Checkpoint(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(ckpt)
    }

    /// Materialize the parameter buffer at the requested precision.
    pub fn parameter_set<T: Scalar>(&self) -> Result<ParameterSet<T>> {
        ParameterSet::from_f64_vec(self.melody_encoder, self.lyrics_encoder, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoders;

    fn tiny(input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            model_dim: 8,
            layers: 1,
            heads: 1,
            feedforward_dim: 16,
            max_len: 8,
            use_positional: true,
        }
    }

    #[test]
    fn save_load_round_trip_preserves_parameters() {
        let params = init_encoders::<f64>(tiny(4), tiny(3), 99).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            melody_encoder: tiny(4),
            lyrics_encoder: tiny(3),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            quantizer: QuantizerStats {
                log_duration_min: -1.0,
                log_duration_max: 1.0,
                log_ioi_min: -2.0,
                log_ioi_max: 0.5,
                bins: 24,
            },
            hashes: VocabHashes::default(),
            best_epoch: 3,
            best_val_loss: 0.25,
            params: params.to_f64_vec(),
        };
        let path = std::env::temp_dir().join("mlmatch-ckpt-roundtrip.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params, ckpt.params);
        let restored = loaded.parameter_set::<f64>().unwrap();
        assert_eq!(restored.as_slice(), params.as_slice());
    }

    #[test]
    fn version_mismatch_rejected() {
        let path = std::env::temp_dir().join("mlmatch-ckpt-badver.json");
        let params = init_encoders::<f64>(tiny(4), tiny(3), 1).unwrap();
        let mut ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            melody_encoder: tiny(4),
            lyrics_encoder: tiny(3),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            quantizer: QuantizerStats {
                log_duration_min: -1.0,
                log_duration_max: 1.0,
                log_ioi_min: -2.0,
                log_ioi_max: 0.5,
                bins: 24,
            },
            hashes: VocabHashes::default(),
            best_epoch: 1,
            best_val_loss: 1.0,
            params: params.to_f64_vec(),
        };
        ckpt.version = 999;
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
