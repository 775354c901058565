//! Training configuration, presets and JSON overlay loading.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::AdamConfig;
use crate::encoders::FusionMode;
use crate::error::{invalid, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::synthdata::{StreamConfig, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => invalid(format!("unknown preset '{other}' (expected desk or paper)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub lr_fusion: f64,
    pub lr_encoders: f64,
    pub warmup: u64,
    /// Chunk size of the contrastive gradient cache.
    pub chunk: usize,
    pub clip_norm: f64,
    pub log_every: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let mut model = ModelConfig::default();
        let mut cfg = Self {
            steps: 2000,
            seed: 0,
            lr_fusion: 1e-3,
            lr_encoders: 5e-4,
            warmup: 200,
            chunk: 24,
            clip_norm: 1.0,
            log_every: 1,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            model: model.clone(),
            stream: StreamConfig::default(),
            synth: SynthConfig::default(),
        };
        if p == Preset::Paper {
            model.fusion = FusionConfig::paper(FusionMode::Merge);
            cfg.model = model;
            cfg.lr_fusion = 2e-5;
            cfg.lr_encoders = 1e-5;
            cfg.warmup = 20000;
            cfg.steps = 100_000;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.steps {
            return invalid(format!("warmup {} exceeds steps {}", self.warmup, self.steps));
        }
        if !(self.lr_fusion > 0.0 && self.lr_encoders > 0.0) {
            return invalid("learning rates must be positive");
        }
        if self.chunk == 0 {
            return invalid("chunk must be at least 1");
        }
        if self.log_every == 0 {
            return invalid("log_every must be at least 1");
        }
        if self.synth.vocab != self.model.encoders.vocab {
            return invalid("synth vocab and encoder vocab differ");
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.stream.validate()?;
        self.synth.validate()
    }

    /// Preset overlaid with a JSON document; unknown keys are rejected.
    pub fn from_json_overlay(preset: Preset, json: &str) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        let overlay: Value = serde_json::from_str(json)?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // maps such as the stream mix are replaced wholesale
                    Some(slot) if slot.is_object() && v.is_object() && k != "mix" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_and_unknown_keys() {
        let cfg = TrainConfig::from_json_overlay(Preset::Desk, r#"{"steps": 300, "model": {"fusion": {"layers": 2}}}"#).unwrap();
        assert_eq!(cfg.steps, 300);
        assert_eq!(cfg.model.fusion.layers, 2);
        assert_eq!(cfg.model.fusion.hidden, TrainConfig::default().model.fusion.hidden);
        assert!(TrainConfig::from_json_overlay(Preset::Desk, r#"{"stepz": 3}"#).is_err());
        assert!(TrainConfig::from_json_overlay(Preset::Desk, r#"{"model": {"fusion": {"depth": 3}}}"#).is_err());
    }

    #[test]
    fn presets_keep_ratio() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = TrainConfig::preset(p);
            assert!((c.lr_fusion / c.lr_encoders - 2.0).abs() < 1e-12);
            c.validate().unwrap();
        }
        let p = TrainConfig::preset(Preset::Paper);
        assert_eq!((p.lr_fusion, p.lr_encoders, p.warmup), (2e-5, 1e-5, 20000));
    }
}
