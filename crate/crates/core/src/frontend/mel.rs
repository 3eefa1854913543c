use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::{FeatureSequence, FrontendConfig};
use crate::error::{Error, Result};

/// Energies are floored at this value before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn band_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let upper = cfg.upper_edge_hz.min(f64::from(cfg.sample_rate) / 2.0);
    let lo = hz_to_mel(cfg.lower_edge_hz);
    let hi = hz_to_mel(upper);
    let n = cfg.num_mel_bins + 1;
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Peak frequency of each triangular mel filter, in Hz.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let edges = band_edges(cfg);
    edges[1..edges.len() - 1].iter().map(|&m| mel_to_hz(m)).collect()
}

/// Triangular filters on the mel axis, one row of `fft_size / 2 + 1`
/// weights per bin.
fn filterbank(cfg: &FrontendConfig, fft_size: usize) -> Vec<Vec<f64>> {
    let edges = band_edges(cfg);
    let sr = f64::from(cfg.sample_rate);
    let spectrum_bins = fft_size / 2 + 1;
    (0..cfg.num_mel_bins)
        .map(|b| {
            let (left, center, right) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..spectrum_bins)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * sr / fft_size as f64);
                    if mel <= left || mel >= right {
                        0.0
                    } else if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log mel filterbank energies, one `num_mel_bins` vector per frame.
///
/// Frames are `frame_length_ms` long every `frame_step_ms`, Hann windowed and
/// zero padded to the next power of two. A clip of `n` samples yields
/// `1 + (n − frame_len) / step` frames.
pub fn log_mel(pcm: &[f64], cfg: &FrontendConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let sr = f64::from(cfg.sample_rate);
    let frame_len = (sr * cfg.frame_length_ms / 1000.0).round() as usize;
    let step = ((sr * cfg.frame_step_ms / 1000.0).round() as usize).max(1);
    if pcm.is_empty() {
        return Err(Error::data("empty audio"));
    }
    if pcm.len() < frame_len {
        return Err(Error::data(format!(
            "audio of {} samples is shorter than one {frame_len}-sample frame",
            pcm.len()
        )));
    }
    let fft_size = frame_len.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame_len as f64).cos())
        .collect();
    let bank = filterbank(cfg, fft_size);

    let num_frames = 1 + (pcm.len() - frame_len) / step;
    let mut values = Vec::with_capacity(num_frames * cfg.num_mel_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut power = vec![0.0; fft_size / 2 + 1];
    for f in 0..num_frames {
        let start = f * step;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < frame_len {
                Complex::new(pcm[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for weights in &bank {
            let e: f64 = weights.iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(LOG_FLOOR).ln());
        }
    }
    FeatureSequence::new(num_frames, cfg.num_mel_bins, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FrontendConfig::default();
        let f = log_mel(&vec![0.0; 16_000], &cfg).unwrap();
        assert!(f.values().iter().all(|&v| v == LOG_FLOOR.ln()));
        assert_eq!(f.dim(), 40);
    }

    #[test]
    fn one_second_frame_count() {
        let cfg = FrontendConfig::default();
        let f = log_mel(&vec![0.0; 16_000], &cfg).unwrap();
        // 400-sample frames every 160 samples
        assert_eq!(f.num_frames(), 1 + (16_000 - 400) / 160);
        assert_eq!(f.num_frames(), 98);
    }

    #[test]
    fn tone_at_bin_center_peaks_in_that_bin() {
        let cfg = FrontendConfig::default();
        let centers = mel_center_frequencies(&cfg);
        for target in [10usize, 20, 30] {
            let freq = centers[target];
            // filter response oracle: only the target triangle peaks at its
            // own centre frequency
            let bank_at = |b: usize| {
                let edges = band_edges(&cfg);
                let m = hz_to_mel(freq);
                let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
                if m <= l || m >= r { 0.0 } else if m <= c { (m - l) / (c - l) } else { (r - m) / (r - c) }
            };
            assert!((bank_at(target) - 1.0).abs() < 1e-12);
            assert!(bank_at(target - 1) < 1e-9 && bank_at(target + 1) < 1e-9);

            let pcm: Vec<f64> = (0..16_000)
                .map(|n| 0.5 * (2.0 * PI * freq * n as f64 / 16_000.0).sin())
                .collect();
            let f = log_mel(&pcm, &cfg).unwrap();
            for t in 0..f.num_frames() {
                let row = f.frame(t);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(best, target, "frame {t}");
            }
        }
    }

    #[test]
    fn input_errors() {
        let cfg = FrontendConfig::default();
        assert!(matches!(log_mel(&[], &cfg), Err(Error::Data(_))));
        assert!(matches!(log_mel(&[0.0; 100], &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic() {
        let cfg = FrontendConfig::default();
        let pcm: Vec<f64> = (0..4000).map(|n| ((n * 7919) % 201) as f64 / 100.0 - 1.0).collect();
        assert_eq!(log_mel(&pcm, &cfg).unwrap(), log_mel(&pcm, &cfg).unwrap());
    }
}
