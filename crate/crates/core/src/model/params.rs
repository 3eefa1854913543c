use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Encoder,
    Decoder,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Encoder => "encoder",
            Head::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Svdf {
        /// `input × (nodes·rank)`
        feature: Tensor,
        /// `(nodes·rank) × memory`, oldest frame first
        time: Tensor,
        bias: Tensor,
    },
    Bottleneck {
        weight: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<LayerParams>,
    pub output: DenseParams,
}

/// All weights of the encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub encoder: HeadParams,
    pub decoder: HeadParams,
}

/// Fan-in and fan-out of a weight tensor; `None` for biases.
type Fans = Option<(usize, usize)>;

fn build_head(
    layers: &[LayerConfig],
    input_dim: usize,
    outputs: usize,
    mut make: impl FnMut(&[usize], Fans) -> Tensor,
) -> HeadParams {
    let mut dim = input_dim;
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        out.push(match layer {
            LayerConfig::Svdf(s) => LayerParams::Svdf {
                feature: make(&[dim, s.nodes * s.rank], Some((dim, s.nodes * s.rank))),
                time: make(&[s.nodes * s.rank, s.memory], Some((s.memory, s.rank))),
                bias: make(&[s.nodes], None),
            },
            LayerConfig::Bottleneck { dim: d } => LayerParams::Bottleneck {
                weight: make(&[dim, *d], Some((dim, *d))),
            },
        });
        dim = layer.output_dim();
    }
    HeadParams {
        layers: out,
        output: DenseParams {
            weight: make(&[dim, outputs], Some((dim, outputs))),
            bias: make(&[outputs], None),
        },
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, |shape, _| Tensor::zeros(shape))
    }

    /// Every weight and bias drawn uniformly from `[-scale, scale)`.
    pub fn init_uniform(config: &ModelConfig, scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::config("init scale must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |shape, _| {
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(shape.to_vec(), v).expect("sized")
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero. A
    /// time filter counts its memory as fan-in and its rank as fan-out.
    pub fn init_glorot(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |shape, fans| {
            let n = shape.iter().product();
            let v = match fans {
                Some((i, o)) => {
                    let a = (6.0 / (i + o) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                None => vec![0.0; n],
            };
            Tensor::new(shape.to_vec(), v).expect("sized")
        })
    }

    fn build(config: &ModelConfig, mut make: impl FnMut(&[usize], Fans) -> Tensor) -> Result<Self> {
        config.validate()?;
        let encoder = build_head(&config.encoder, config.input_dim, config.encoder_outputs, &mut make);
        let decoder = build_head(
            &config.decoder,
            config.encoder_outputs,
            config.decoder_outputs,
            &mut make,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self, head: Head) -> &HeadParams {
        match head {
            Head::Encoder => &self.encoder,
            Head::Decoder => &self.decoder,
        }
    }

    /// Tensors in canonical order with their names and owning head.
    pub fn named_tensors(&self) -> Vec<(String, Head, &Tensor)> {
        let mut out = Vec::new();
        for head in [Head::Encoder, Head::Decoder] {
            let p = self.head(head);
            let pre = head.prefix();
            for (i, layer) in p.layers.iter().enumerate() {
                match layer {
                    LayerParams::Svdf {
                        feature,
                        time,
                        bias,
                    } => {
                        out.push((format!("{pre}.{i}.feature"), head, feature));
                        out.push((format!("{pre}.{i}.time"), head, time));
                        out.push((format!("{pre}.{i}.bias"), head, bias));
                    }
                    LayerParams::Bottleneck { weight } => {
                        out.push((format!("{pre}.{i}.weight"), head, weight));
                    }
                }
            }
            out.push((format!("{pre}.out.weight"), head, &p.output.weight));
            out.push((format!("{pre}.out.bias"), head, &p.output.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in [&mut self.encoder, &mut self.decoder] {
            for layer in &mut p.layers {
                match layer {
                    LayerParams::Svdf {
                        feature,
                        time,
                        bias,
                    } => {
                        out.push(feature);
                        out.push(time);
                        out.push(bias);
                    }
                    LayerParams::Bottleneck { weight } => out.push(weight),
                }
            }
            out.push(&mut p.output.weight);
            out.push(&mut p.output.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `true` for each flat coordinate owned by `head`.
    pub fn head_mask(&self, head: Head) -> Vec<bool> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, h, t)| std::iter::repeat_n(*h == head, t.len()))
            .collect()
    }
}
