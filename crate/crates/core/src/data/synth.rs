use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Annotation, Utterance};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;

/// Feature-space keyword corpus: each frame is a sound-unit template plus
/// Gaussian noise. A positive contains units `1..=K` in order, each held for
/// a random number of frames, somewhere inside background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_units: usize,
    pub feature_dim: usize,
    /// `K + 1` template points, background first. `None` places background at
    /// the origin and unit `i` at `template_scale · e_{i−1}`.
    pub templates: Option<Vec<Vec<f64>>>,
    pub template_scale: f64,
    pub unit_frames: (usize, usize),
    pub noise_sigma: f64,
    pub keyword_probability: f64,
    pub length_frames: (usize, usize),
    /// Minimum background frames before the keyword starts.
    pub lead_frames: usize,
    /// Minimum background frames after the keyword ends.
    pub tail_frames: usize,
    /// Share of negatives carrying a keyword prefix or a shuffled unit order.
    pub hard_negative_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_units: 4,
            feature_dim: 10,
            templates: None,
            template_scale: 2.0,
            unit_frames: (8, 16),
            noise_sigma: 0.6,
            keyword_probability: 0.5,
            length_frames: (150, 220),
            lead_frames: 30,
            tail_frames: 50,
            hard_negative_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_units == 0 {
            return Err(Error::config("synth needs K >= 1"));
        }
        let (umin, umax) = self.unit_frames;
        if umin == 0 || umin > umax {
            return Err(Error::config(format!("bad unit duration range {:?}", self.unit_frames)));
        }
        let (lmin, lmax) = self.length_frames;
        if lmin > lmax {
            return Err(Error::config(format!("bad length range {:?}", self.length_frames)));
        }
        let needed = self.lead_frames + self.num_units * umax + self.tail_frames;
        if lmin < needed {
            return Err(Error::config(format!(
                "utterances of {lmin} frames cannot hold a keyword of up to {} frames plus margins ({needed})",
                self.num_units * umax
            )));
        }
        if !(0.0..=1.0).contains(&self.keyword_probability) || !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        match &self.templates {
            Some(t) if t.len() != self.num_units + 1 || t.iter().any(|p| p.len() != self.feature_dim) => {
                Err(Error::config(format!(
                    "need {} templates of dim {}",
                    self.num_units + 1,
                    self.feature_dim
                )))
            }
            None if self.feature_dim < self.num_units => Err(Error::config(
                "default templates need feature_dim >= K",
            )),
            _ => Ok(()),
        }
    }

    pub fn resolved_templates(&self) -> Vec<Vec<f64>> {
        if let Some(t) = &self.templates {
            return t.clone();
        }
        (0..=self.num_units)
            .map(|i| {
                let mut p = vec![0.0; self.feature_dim];
                if i > 0 {
                    p[i - 1] = self.template_scale;
                }
                p
            })
            .collect()
    }
}

enum Content {
    Keyword,
    Prefix,
    Shuffled,
    Background,
}

fn generate_one(cfg: &SynthConfig, templates: &[Vec<f64>], id: u32) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::from(id));
    let k = cfg.num_units;

    let content = if rng.random_bool(cfg.keyword_probability) {
        Content::Keyword
    } else if rng.random_bool(cfg.hard_negative_fraction) {
        // K = 1 has no proper prefix or distinct permutation
        if k < 2 || rng.random_bool(0.5) { Content::Prefix } else { Content::Shuffled }
    } else {
        Content::Background
    };
    let units: Vec<u16> = match content {
        Content::Keyword => (1..=k as u16).collect(),
        Content::Prefix => (1..k as u16).collect(),
        Content::Shuffled => {
            let ordered: Vec<u16> = (1..=k as u16).collect();
            let mut u = ordered.clone();
            while u == ordered {
                u.shuffle(&mut rng);
            }
            u
        }
        Content::Background => Vec::new(),
    };

    let len = rng.random_range(cfg.length_frames.0..=cfg.length_frames.1);
    let durations: Vec<usize> = units
        .iter()
        .map(|_| rng.random_range(cfg.unit_frames.0..=cfg.unit_frames.1))
        .collect();
    let span: usize = durations.iter().sum();
    let start = rng.random_range(cfg.lead_frames..=len - cfg.tail_frames - span);

    let mut labels = vec![0u16; len];
    let mut t = start;
    for (u, d) in units.iter().zip(&durations) {
        labels[t..t + d].fill(*u);
        t += d;
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut values = Vec::with_capacity(len * cfg.feature_dim);
    for &l in &labels {
        for &m in &templates[usize::from(l)] {
            let v = if cfg.noise_sigma > 0.0 { m + noise.sample(&mut rng) } else { m };
            values.push(f64::from(v as f32));
        }
    }
    let features = FeatureSequence::new(len, cfg.feature_dim, values)?;
    let annotation = match content {
        Content::Keyword => Annotation::Positive {
            keyword_end: start + span,
            keyword_start: Some(start),
            labels: Some(labels),
        },
        _ => Annotation::Negative { labels: Some(labels) },
    };
    Ok(Utterance {
        id,
        features,
        annotation,
    })
}

/// Generates `count` utterances with ids `0..count`. Each utterance draws from
/// its own RNG stream keyed by `(seed, id)`, so output is independent of the
/// worker count.
pub fn synth_corpus(cfg: &SynthConfig, count: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let templates: Vec<Vec<f64>> = cfg
        .resolved_templates()
        .into_iter()
        .map(|p| p.into_iter().map(|v| f64::from(v as f32)).collect())
        .collect();
    let count = u32::try_from(count).map_err(|_| Error::config("count exceeds u32"))?;
    (0..count)
        .into_par_iter()
        .map(|id| generate_one(cfg, &templates, id))
        .collect()
}
