//! Frame-by-frame inference with persistent per-layer history.

use super::config::{LayerConfig, ModelConfig, SvdfLayerConfig};
use super::params::{DenseParams, HeadParams, LayerParams, ModelParams};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::numerics::{softmax, Tensor};

/// Ring buffer of the last `memory` feature-filter outputs of one SVDF
/// layer, `nodes·rank` values per slot. Starts zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdfBuffer {
    memory: usize,
    width: usize,
    slots: Vec<f64>,
    /// slot holding the oldest entry
    oldest: usize,
}

impl SvdfBuffer {
    pub fn new(memory: usize, width: usize) -> Self {
        Self {
            memory,
            width,
            slots: vec![0.0; memory * width],
            oldest: 0,
        }
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    fn push(&mut self, entry: &[f64]) {
        let at = self.oldest * self.width;
        self.slots[at..at + self.width].copy_from_slice(entry);
        self.oldest = (self.oldest + 1) % self.memory;
    }

    /// `k = 0` is the oldest entry, `k = memory − 1` the newest.
    fn entry(&self, k: usize) -> &[f64] {
        let s = (self.oldest + k) % self.memory;
        &self.slots[s * self.width..(s + 1) * self.width]
    }
}

/// History buffers for every SVDF layer of both heads, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingState {
    buffers: Vec<Option<SvdfBuffer>>,
    frames_seen: usize,
}

impl StreamingState {
    pub fn new(config: &ModelConfig) -> Self {
        let buffers = config
            .encoder
            .iter()
            .chain(&config.decoder)
            .map(|l| match l {
                LayerConfig::Svdf(s) => Some(SvdfBuffer::new(s.memory, s.nodes * s.rank)),
                LayerConfig::Bottleneck { .. } => None,
            })
            .collect();
        Self {
            buffers,
            frames_seen: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }
}

/// One SVDF layer for one frame: push the feature-filter projections into the
/// buffer, then `activation(time filter · buffer + bias)` per node.
pub fn svdf_step(
    layer: &SvdfLayerConfig,
    feature: &Tensor,
    time: &Tensor,
    bias: &Tensor,
    buffer: &mut SvdfBuffer,
    frame: &[f64],
) -> Result<Vec<f64>> {
    let width = layer.nodes * layer.rank;
    let (in_dim, fcols) = feature.dims2()?;
    if frame.len() != in_dim
        || fcols != width
        || time.shape() != [width, layer.memory]
        || bias.len() != layer.nodes
        || buffer.width != width
        || buffer.memory != layer.memory
    {
        return Err(Error::config(format!(
            "svdf step: frame of {} for layer {layer:?} with feature {:?}",
            frame.len(),
            feature.shape()
        )));
    }
    let mut projected = vec![0.0; width];
    for (i, x) in frame.iter().enumerate() {
        for (p, w) in projected.iter_mut().zip(feature.row(i)) {
            *p += x * w;
        }
    }
    buffer.push(&projected);

    let mut out = bias.data().to_vec();
    for k in 0..layer.memory {
        let e = buffer.entry(k);
        for (n, o) in out.iter_mut().enumerate() {
            for r in 0..layer.rank {
                let j = n * layer.rank + r;
                *o += time.data()[j * layer.memory + k] * e[j];
            }
        }
    }
    for o in out.iter_mut() {
        *o = layer.activation.apply(*o);
    }
    Ok(out)
}

fn dense_softmax(p: &DenseParams, h: &[f64]) -> Result<Vec<f64>> {
    let x = Tensor::vector(h.to_vec());
    let mut logits = crate::numerics::matmul(&x, &p.weight)?.into_data();
    for (l, b) in logits.iter_mut().zip(p.bias.data()) {
        *l += b;
    }
    Ok(softmax(&Tensor::vector(logits), 0)?.into_data())
}

fn head_step(
    layers: &[LayerConfig],
    params: &HeadParams,
    buffers: &mut [Option<SvdfBuffer>],
    frame: &[f64],
) -> Result<Vec<f64>> {
    let mut h = frame.to_vec();
    for ((cfg, p), buf) in layers.iter().zip(&params.layers).zip(buffers) {
        h = match (cfg, p, buf) {
            (LayerConfig::Svdf(s), LayerParams::Svdf { feature, time, bias }, Some(b)) => {
                svdf_step(s, feature, time, bias, b, &h)?
            }
            (LayerConfig::Bottleneck { .. }, LayerParams::Bottleneck { weight }, None) => {
                crate::numerics::matmul(&Tensor::vector(h), weight)?.into_data()
            }
            _ => return Err(Error::config("streaming state does not match the model")),
        };
    }
    dense_softmax(&params.output, &h)
}

/// Posteriors of both heads for one input frame.
pub fn step_frame(
    params: &ModelParams,
    state: &mut StreamingState,
    frame: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = params.config();
    if state.buffers.len() != cfg.encoder.len() + cfg.decoder.len() {
        return Err(Error::config("streaming state does not match the model"));
    }
    let (enc_bufs, dec_bufs) = state.buffers.split_at_mut(cfg.encoder.len());
    let enc = head_step(&cfg.encoder, &params.encoder, enc_bufs, frame)?;
    let dec = head_step(&cfg.decoder, &params.decoder, dec_bufs, &enc)?;
    state.frames_seen += 1;
    Ok((enc, dec))
}

/// Streams every frame of `x` through the model, carrying `state` across
/// calls. Returns `(Y^E, Y^D)` for the new frames only.
pub fn full_forward_streaming(
    x: &FeatureSequence,
    params: &ModelParams,
    state: &mut StreamingState,
) -> Result<(Tensor, Tensor)> {
    let cfg = params.config();
    if x.num_frames() > 0 && x.dim() != cfg.input_dim {
        return Err(Error::config(format!(
            "input dim {} but model expects {}",
            x.dim(),
            cfg.input_dim
        )));
    }
    let mut enc = Vec::with_capacity(x.num_frames() * cfg.encoder_outputs);
    let mut dec = Vec::with_capacity(x.num_frames() * cfg.decoder_outputs);
    for t in 0..x.num_frames() {
        let (e, d) = step_frame(params, state, x.frame(t))?;
        enc.extend(e);
        dec.extend(d);
    }
    Ok((
        Tensor::new(vec![x.num_frames(), cfg.encoder_outputs], enc)?,
        Tensor::new(vec![x.num_frames(), cfg.decoder_outputs], dec)?,
    ))
}
