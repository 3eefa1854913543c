//! Per-frame features and context stacking.
//!
//! Audio goes through [`log_mel`]; the synthetic pipeline builds
//! [`FeatureSequence`]s directly. Either way the model consumes the output of
//! [`stack_frames`].

mod mel;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mel::{log_mel, mel_center_frequencies, LOG_FLOOR};
pub use wav::{read_wav, write_wav};

/// Frame period of every feature sequence, in milliseconds.
pub const FRAME_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_step_ms: f64,
    pub frame_length_ms: f64,
    pub num_mel_bins: usize,
    pub lower_edge_hz: f64,
    pub upper_edge_hz: f64,
    pub left_context: usize,
    pub right_context: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_step_ms: 10.0,
            frame_length_ms: 25.0,
            num_mel_bins: 40,
            lower_edge_hz: 125.0,
            upper_edge_hz: 7_500.0,
            left_context: 3,
            right_context: 1,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_step_ms > 0.0) || !(self.frame_length_ms > 0.0) {
            return Err(Error::config("frame step and length must be positive"));
        }
        if self.num_mel_bins == 0 {
            return Err(Error::config("num_mel_bins must be at least 1"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(self.lower_edge_hz >= 0.0 && self.lower_edge_hz < self.upper_edge_hz.min(nyquist)) {
            return Err(Error::config(format!(
                "mel band [{}, {}] Hz invalid for sample rate {}",
                self.lower_edge_hz, self.upper_edge_hz, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Width of one stacked input vector for `dim`-dimensional frames.
    pub fn stacked_dim(&self, dim: usize) -> usize {
        dim * (self.left_context + self.right_context + 1)
    }
}

/// Time-major matrix of per-frame feature vectors at a 10 ms frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    num_frames: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(num_frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_frames * dim {
            return Err(Error::shape(format!(
                "{num_frames} frames of dim {dim} need {} values, got {}",
                num_frames * dim,
                values.len()
            )));
        }
        Ok(Self {
            num_frames,
            dim,
            values,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::shape("frames differ in dimension"));
        }
        Self::new(frames.len(), dim, frames.concat())
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn duration_hours(&self) -> f64 {
        self.num_frames as f64 * FRAME_MS / 3_600_000.0
    }
}

/// Concatenates each frame with `left` past and `right` future neighbours,
/// replicating the edge frames where the neighbourhood runs off the ends.
pub fn stack_frames(f: &FeatureSequence, left: usize, right: usize) -> FeatureSequence {
    let width = left + right + 1;
    let n = f.num_frames;
    let mut values = Vec::with_capacity(n * f.dim * width);
    for t in 0..n {
        for off in 0..width {
            let src = (t + off).saturating_sub(left).min(n - 1);
            values.extend_from_slice(f.frame(src));
        }
    }
    FeatureSequence {
        num_frames: n,
        dim: f.dim * width,
        values,
    }
}

/// Recovers the centre slice of a stacked sequence.
pub fn unstack_center(stacked: &FeatureSequence, left: usize, right: usize) -> Result<FeatureSequence> {
    let width = left + right + 1;
    if stacked.dim % width != 0 {
        return Err(Error::shape(format!(
            "stacked dim {} not divisible by context width {width}",
            stacked.dim
        )));
    }
    let d = stacked.dim / width;
    let values = (0..stacked.num_frames)
        .flat_map(|t| stacked.frame(t)[left * d..(left + 1) * d].iter().copied())
        .collect();
    FeatureSequence::new(stacked.num_frames, d, values)
}
