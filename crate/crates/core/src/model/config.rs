use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }
}

/// Rank-factorized streaming layer: a per-frame feature filter followed by a
/// time filter over the last `memory` feature-filter outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvdfLayerConfig {
    pub nodes: usize,
    pub memory: usize,
    pub rank: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl SvdfLayerConfig {
    pub fn new(nodes: usize, memory: usize, rank: usize) -> Self {
        Self {
            nodes,
            memory,
            rank,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerConfig {
    Svdf(SvdfLayerConfig),
    /// Linear projection without bias or activation.
    Bottleneck { dim: usize },
}

impl LayerConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            LayerConfig::Svdf(s) => s.nodes,
            LayerConfig::Bottleneck { dim } => *dim,
        }
    }

    /// Frames of history this layer can see beyond the current one.
    pub fn lookback(&self) -> usize {
        match self {
            LayerConfig::Svdf(s) => s.memory - 1,
            LayerConfig::Bottleneck { .. } => 0,
        }
    }
}

/// Encoder emits `encoder_outputs = K + 1` sound-unit posteriors (unit 0 is
/// background); the decoder reads them and emits two (dim 1 = keyword).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder: Vec<LayerConfig>,
    pub encoder_outputs: usize,
    pub decoder: Vec<LayerConfig>,
    pub decoder_outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            // 10-d synthetic frames with 3 left / 1 right context
            input_dim: 50,
            encoder: vec![
                LayerConfig::Svdf(SvdfLayerConfig::new(32, 8, 1)),
                LayerConfig::Svdf(SvdfLayerConfig::new(32, 8, 1)),
                LayerConfig::Bottleneck { dim: 16 },
                LayerConfig::Svdf(SvdfLayerConfig::new(32, 8, 1)),
            ],
            encoder_outputs: 5,
            decoder: vec![
                LayerConfig::Svdf(SvdfLayerConfig::new(16, 16, 1)),
                LayerConfig::Svdf(SvdfLayerConfig::new(16, 16, 1)),
            ],
            decoder_outputs: 2,
        }
    }
}

impl ModelConfig {
    /// Number of keyword sound units `K`.
    pub fn num_units(&self) -> usize {
        self.encoder_outputs - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if self.encoder_outputs < 2 {
            return Err(Error::config("encoder needs at least 2 outputs"));
        }
        if self.decoder_outputs != 2 {
            return Err(Error::config("decoder must have exactly 2 outputs"));
        }
        for layer in self.encoder.iter().chain(&self.decoder) {
            match layer {
                LayerConfig::Svdf(s) if s.nodes == 0 || s.memory == 0 || s.rank == 0 => {
                    return Err(Error::config(format!(
                        "svdf layer needs nodes, memory, rank >= 1: {s:?}"
                    )))
                }
                LayerConfig::Bottleneck { dim: 0 } => {
                    return Err(Error::config("bottleneck dim must be positive"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Total frames of history visible to the decoder output.
    pub fn receptive_lookback(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(LayerConfig::lookback)
            .sum()
    }
}
