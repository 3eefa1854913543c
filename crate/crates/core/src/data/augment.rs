use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Annotation, Utterance};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Feature-space SNR range in dB; an infinite bound disables noise.
    pub snr_db: (f64, f64),
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            snr_db: (10.0, 30.0),
            max_shift: 10,
        }
    }
}

/// Random time shift (edge-replicated, never wrapping) followed by additive
/// Gaussian noise at a sampled SNR. Shifts of positives are clamped so the
/// keyword stays inside the utterance; keyword end and labels move with it.
pub fn augment<R: Rng + ?Sized>(u: &Utterance, cfg: &AugmentConfig, rng: &mut R) -> Result<Utterance> {
    let (lo, hi) = cfg.snr_db;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::config(format!("bad SNR range {:?}", cfg.snr_db)));
    }
    let n = u.num_frames() as i64;
    let max = cfg.max_shift as i64;
    let mut shift = if max > 0 { rng.random_range(-max..=max) } else { 0 };
    match &u.annotation {
        Annotation::Positive {
            keyword_end,
            keyword_start,
            ..
        } => {
            let first = keyword_start.unwrap_or(keyword_end.saturating_sub(1)) as i64;
            shift = shift.clamp(-first, n - 1 - *keyword_end as i64);
        }
        Annotation::Negative { .. } => shift = shift.clamp(-(n - 1).max(0), (n - 1).max(0)),
    }
    let mut out = shifted(u, shift);

    let snr = if lo == hi { lo } else { rng.random_range(lo..hi) };
    if snr.is_finite() {
        let v = out.features.values();
        let power = v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::numeric(e.to_string()))?;
            for x in out.features.values_mut() {
                *x = f64::from((*x + noise.sample(rng)) as f32);
            }
        }
    }
    Ok(out)
}

fn shifted(u: &Utterance, shift: i64) -> Utterance {
    if shift == 0 {
        return u.clone();
    }
    let n = u.num_frames();
    let dim = u.features.dim();
    let src = |t: usize| (t as i64 - shift).clamp(0, n as i64 - 1) as usize;
    let inside = |t: usize| (0..n as i64).contains(&(t as i64 - shift));
    let values = (0..n).flat_map(|t| u.features.frame(src(t)).iter().copied()).collect();
    let features = FeatureSequence::new(n, dim, values).expect("same size");

    let mut annotation = u.annotation.clone();
    if let Annotation::Positive {
        keyword_end,
        keyword_start,
        ..
    } = &mut annotation
    {
        *keyword_end = (*keyword_end as i64 + shift) as usize;
        if let Some(s) = keyword_start {
            *s = (*s as i64 + shift) as usize;
        }
    }
    if let Some(labels) = annotation.labels_mut() {
        *labels = (0..n).map(|t| if inside(t) { labels[src(t)] } else { 0 }).collect();
    }
    Utterance {
        id: u.id,
        features,
        annotation,
    }
}
