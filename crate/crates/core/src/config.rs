//! Run configuration shared by the command-line tools.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::matching::KSemantics;
use crate::model::{FusionMode, ModelConfig};
use crate::prototypes::{SlotLayout, SlotNormalization};
use crate::train::{RefreshPolicy, TrainConfig};
use crate::vlas::ThresholdMode;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 224x224 images, 16 px patches, 768-dim features, m = 10.
    #[default]
    Full,
    /// 8x8 grid, 16-dim features, 24-dim tokens, m = 4.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub theta: f64,
    pub vlas_k: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub d: usize,
    pub d_text: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub slot_layout: SlotLayout,
    pub slot_normalization: SlotNormalization,
    pub fusion: FusionMode,
    pub refresh: RefreshPolicy,
    pub k_semantics: KSemantics,
    pub threshold: ThresholdMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = RunConfig {
            m: 10,
            k: 3,
            r: 3,
            theta: 0.5,
            vlas_k: 1,
            seed: DEFAULT_SEED,
            grid: GridSpec::new(224, 224, 16).expect("valid grid"),
            d: 768,
            d_text: 768,
            epochs: 200,
            lr: 1e-4,
            batch_size: 64,
            slot_layout: SlotLayout::default(),
            slot_normalization: SlotNormalization::default(),
            fusion: FusionMode::default(),
            refresh: RefreshPolicy::default(),
            k_semantics: KSemantics::default(),
            threshold: ThresholdMode::default(),
        };
        match p {
            Preset::Full => base,
            Preset::Desk => RunConfig {
                m: 4,
                grid: GridSpec::new(128, 128, 16).expect("valid grid"),
                d: 16,
                d_text: 24,
                epochs: 50,
                lr: 1e-2,
                batch_size: 16,
                ..base
            },
        }
    }

    /// Applies a JSON object of field overrides on top of `self`.
    pub fn with_overrides(&self, json: &str) -> Result<Self> {
        let patch: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::format("config", e.to_string()))?;
        let serde_json::Value::Object(fields) = patch else {
            return Err(Error::format("config", "expected a JSON object"));
        };
        let mut base = serde_json::to_value(self).expect("config serialises");
        let obj = base.as_object_mut().expect("config is an object");
        for (key, value) in fields {
            obj.insert(key, value);
        }
        let out: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::format("config", e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("m", self.m),
            ("k", self.k),
            ("vlas_k", self.vlas_k),
            ("d", self.d),
            ("d_text", self.d_text),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!(
                "theta must lie in (0, 1), got {}",
                self.theta
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            m: self.m,
            k: self.k,
            r: self.r,
            grid: self.grid,
            d: self.d,
            d_text: self.d_text,
            seed: self.seed,
            slot_layout: self.slot_layout,
            slot_normalization: self.slot_normalization,
            fusion: self.fusion,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            refresh: self.refresh,
            ..TrainConfig::new(self.epochs, self.lr, self.batch_size, self.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.m, c.k, c.r, c.theta), (10, 3, 3, 0.5));
        assert_eq!(c.grid.num_patches(), 196);
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.m, d.d, d.d_text, d.grid.num_patches()), (4, 16, 24, 64));
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(r#"{"m": 2, "grid": {"image_height": 64, "image_width": 32, "patch_size": 16}, "fusion": "concat"}"#)
            .unwrap();
        assert_eq!(c.m, 2);
        assert_eq!((c.grid.rows(), c.grid.cols()), (4, 2));
        assert_eq!(c.fusion, FusionMode::Concat);
        assert_eq!(c.k, 3);

        let base = RunConfig::default();
        assert!(base.with_overrides(r#"{"bogus": 1}"#).is_err());
        assert!(base.with_overrides(r#"{"m": 0}"#).is_err());
        assert!(base.with_overrides(r#"{"theta": 1.5}"#).is_err());
        assert!(base.with_overrides("[1]").is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::preset(Preset::Desk);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
