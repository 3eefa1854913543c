//! Run configuration shared by every subcommand, and the built-in presets
//! for the ablation matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{AblationConfig, EvalConfig};
use crate::frontend::FrontendConfig;
use crate::losses::{HeadLoss, LossSpec};
use crate::model::ModelConfig;
use crate::training::{TrainConfig, TrainSettings};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub train: TrainSettings,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Model input width for raw features of dimension `feature_dim`.
    pub fn check_input_dim(&self, feature_dim: usize) -> Result<()> {
        let stacked = self.frontend.stacked_dim(feature_dim);
        if stacked != self.model.input_dim {
            return Err(Error::config(format!(
                "features of dim {feature_dim} stack to {stacked} with context ({}, {}) but model.input_dim is {}",
                self.frontend.left_context, self.frontend.right_context, self.model.input_dim
            )));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides. Values parse as JSON and fall
    /// back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::config(format!("override {path}: no such key")))?;
            }
            *node = value;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            loss: self.loss.clone(),
            settings: self.train.clone(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let p = PRESETS
            .iter()
            .find(|p| p.key == name || p.display.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|p| p.key).collect();
                Error::config(format!("unknown preset {name}; known: {}", known.join(", ")))
            })?;
        Ok(p.apply(RunConfig::default()))
    }
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub key: &'static str,
    pub display: &'static str,
    pub encoder: HeadLoss,
    pub decoder: HeadLoss,
    pub two_stage: bool,
}

impl Preset {
    pub fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        cfg.loss.encoder = self.encoder;
        cfg.loss.decoder = self.decoder;
        if self.encoder == HeadLoss::None {
            cfg.loss.alpha = 0.0;
        }
        cfg.train.two_stage = self.two_stage;
        cfg
    }
}

const fn preset(key: &'static str, display: &'static str, encoder: HeadLoss, decoder: HeadLoss) -> Preset {
    Preset {
        key,
        display,
        encoder,
        decoder,
        two_stage: false,
    }
}

pub const PRESETS: [Preset; 7] = [
    Preset {
        two_stage: true,
        ..preset("baseline_ce_ce", "Baseline_CE_CE", HeadLoss::Ce, HeadLoss::Ce)
    },
    preset("max2_na_smp", "Max2_NA_SMP", HeadLoss::None, HeadLoss::Smp),
    preset("max3_ce_smp", "Max3_CE_SMP", HeadLoss::Ce, HeadLoss::Smp),
    preset("max4_smp_smp", "Max4_SMP_SMP", HeadLoss::Smp, HeadLoss::Smp),
    preset("max5_mp_smp", "Max5_MP_SMP", HeadLoss::Mp, HeadLoss::Smp),
    preset("max6_smp_mp", "Max6_SMP_MP", HeadLoss::Smp, HeadLoss::Mp),
    preset("max7_mp_mp", "Max7_MP_MP", HeadLoss::Mp, HeadLoss::Mp),
];
