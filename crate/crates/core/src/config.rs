//! The single JSON run configuration. Every field has a default and unknown
//! keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{HamError, Result};
use crate::eval::EvalConfig;
use crate::merge::MergeStrategy;
use crate::model::EncoderConfig;
use crate::train::HarmonyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub logit_scale: f64,
    /// Seeds the shared initialization and the frozen prototypes.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            hidden_dims: enc.hidden_dims,
            embed_dim: enc.embed_dim,
            logit_scale: enc.logit_scale,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            logit_scale: self.logit_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub strategy: MergeStrategy,
    pub trim_ratio: f64,
    /// Estimate the trim threshold from this many sampled magnitudes.
    pub percentile_sample: Option<usize>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            strategy: MergeStrategy::Rhm,
            trim_ratio: 0.2,
            percentile_sample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: HarmonyConfig,
    pub merge: MergeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            HamError::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HamError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder().validate()?;
        if self.model.embed_dim < 2 {
            return Err(HamError::config("model.embed_dim", "prototypes need D >= 2"));
        }
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.merge.trim_ratio) {
            return Err(HamError::config("merge.trim_ratio", "must lie in [0, 1)"));
        }
        if self.merge.percentile_sample == Some(0) {
            return Err(HamError::config("merge.percentile_sample", "must be >= 1"));
        }
        if self.eval.seeds.is_empty() {
            return Err(HamError::config("eval.seeds", "at least one seed is required"));
        }
        if self.eval.strategies.is_empty() {
            return Err(HamError::config("eval.strategies", "at least one strategy row is required"));
        }
        if let Some(held) = &self.eval.held_out {
            let ids: Vec<usize> = self.data.domains.iter().map(|d| d.domain_id).collect();
            if let Some(bad) = held.iter().find(|h| !ids.contains(h)) {
                return Err(HamError::config("eval.held_out", format!("unknown domain id {bad}")));
            }
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        self.model.encoder(self.data.input_dim)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
