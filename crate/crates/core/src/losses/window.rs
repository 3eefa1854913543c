use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open frame interval `[start, end)` whose pooled maximum on output
/// `dim` is pushed towards 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolingWindow {
    pub dim: usize,
    pub start: usize,
    pub end: usize,
}

impl PoolingWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

/// Window placement relative to the keyword end `ω_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub decoder_offset: i64,
    pub decoder_size: usize,
    pub encoder_offset: i64,
    pub encoder_size: usize,
    /// Distance between consecutive encoder window starts; `None` means
    /// abutting windows (stride = `encoder_size`).
    pub encoder_stride: Option<usize>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            decoder_offset: 40,
            decoder_size: 60,
            encoder_offset: 40,
            encoder_size: 20,
            encoder_stride: None,
        }
    }
}

impl WindowSpec {
    pub fn stride(&self) -> usize {
        self.encoder_stride.unwrap_or(self.encoder_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_size == 0 || self.encoder_size == 0 {
            return Err(Error::config("window sizes must be positive"));
        }
        if self.stride() < self.encoder_size {
            return Err(Error::config(format!(
                "encoder stride {} below window size {} would overlap windows",
                self.stride(),
                self.encoder_size
            )));
        }
        Ok(())
    }
}

/// `[start, start + size)` clipped to `[0, num_frames)`; `None` if nothing
/// is left.
fn clamp(dim: usize, start: i64, size: usize, num_frames: usize) -> Option<PoolingWindow> {
    let end = start.saturating_add(size as i64).min(num_frames as i64);
    let start = start.max(0);
    (start < end).then(|| PoolingWindow {
        dim,
        start: start as usize,
        end: end as usize,
    })
}

fn check_end(keyword_end: usize, num_frames: usize) -> Result<()> {
    if keyword_end >= num_frames {
        return Err(Error::data(format!(
            "keyword end {keyword_end} outside {num_frames} frames"
        )));
    }
    Ok(())
}

pub(crate) fn try_decoder_window(keyword_end: usize, spec: &WindowSpec, num_frames: usize) -> Option<PoolingWindow> {
    let start = keyword_end as i64 + spec.decoder_offset - spec.decoder_size as i64;
    clamp(1, start, spec.decoder_size, num_frames)
}

pub(crate) fn try_encoder_windows(
    keyword_end: usize,
    spec: &WindowSpec,
    num_units: usize,
    num_frames: usize,
) -> Option<Vec<PoolingWindow>> {
    let stride = spec.stride() as i64;
    (1..=num_units)
        .map(|i| {
            let start = keyword_end as i64 + spec.encoder_offset - stride * (num_units - i + 1) as i64;
            clamp(i, start, spec.encoder_size, num_frames)
        })
        .collect()
}

/// The single decoder window on output 1, starting at
/// `ω_end + offset − size`.
pub fn decoder_windows(keyword_end: usize, spec: &WindowSpec, num_frames: usize) -> Result<[PoolingWindow; 1]> {
    spec.validate()?;
    check_end(keyword_end, num_frames)?;
    try_decoder_window(keyword_end, spec, num_frames)
        .map(|w| [w])
        .ok_or_else(|| Error::data(format!("decoder window empty after clamping (keyword end {keyword_end})")))
}

/// `K` encoder windows; window `i` (output `i`) starts at
/// `ω_end + offset − stride·(K − i + 1)`.
pub fn encoder_windows(
    keyword_end: usize,
    spec: &WindowSpec,
    num_units: usize,
    num_frames: usize,
) -> Result<Vec<PoolingWindow>> {
    spec.validate()?;
    check_end(keyword_end, num_frames)?;
    try_encoder_windows(keyword_end, spec, num_units, num_frames)
        .ok_or_else(|| Error::data(format!("encoder window empty after clamping (keyword end {keyword_end})")))
}

/// Frames outside every window, ascending.
pub fn complement_frames(windows: &[PoolingWindow], num_frames: usize) -> Vec<usize> {
    (0..num_frames).filter(|&t| !windows.iter().any(|w| w.contains(t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(dim: usize, start: usize, end: usize) -> PoolingWindow {
        PoolingWindow { dim, start, end }
    }

    #[test]
    fn decoder_placement() {
        let spec = WindowSpec::default();
        assert_eq!(decoder_windows(100, &spec, 300).unwrap(), [w(1, 80, 140)]);
        assert_eq!(decoder_windows(10, &spec, 300).unwrap(), [w(1, 0, 50)]);
        assert_eq!(decoder_windows(100, &spec, 120).unwrap(), [w(1, 80, 120)]);
        let equal = WindowSpec {
            decoder_offset: 25,
            decoder_size: 25,
            ..spec
        };
        assert_eq!(decoder_windows(100, &equal, 300).unwrap()[0].end, 125);
    }

    #[test]
    fn encoder_placement() {
        let spec = WindowSpec::default();
        assert_eq!(
            encoder_windows(200, &spec, 4, 400).unwrap(),
            vec![w(1, 160, 180), w(2, 180, 200), w(3, 200, 220), w(4, 220, 240)]
        );
        let spaced = WindowSpec {
            encoder_stride: Some(40),
            ..spec.clone()
        };
        assert_eq!(encoder_windows(100, &spaced, 2, 400).unwrap(), vec![w(1, 60, 80), w(2, 100, 120)]);
    }

    #[test]
    fn single_unit_matches_decoder_form() {
        let spec = WindowSpec {
            decoder_offset: 40,
            decoder_size: 20,
            ..Default::default()
        };
        let e = encoder_windows(77, &spec, 1, 300).unwrap();
        let d = decoder_windows(77, &spec, 300).unwrap();
        assert_eq!((e[0].start, e[0].end), (d[0].start, d[0].end));
    }

    #[test]
    fn errors() {
        let spec = WindowSpec {
            decoder_offset: -100,
            ..Default::default()
        };
        assert!(matches!(decoder_windows(10, &spec, 300), Err(Error::Data(_))));
        assert!(matches!(decoder_windows(300, &WindowSpec::default(), 300), Err(Error::Data(_))));
        let overlap = WindowSpec {
            encoder_stride: Some(10),
            ..Default::default()
        };
        assert!(matches!(encoder_windows(100, &overlap, 4, 300), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn windows_and_complement_partition(
            end in 0usize..300,
            extra in 1usize..200,
            k in 1usize..6,
            off in -50i64..80,
            size in 1usize..40,
            gap in 0usize..20,
        ) {
            let n = end + extra;
            let spec = WindowSpec {
                decoder_offset: off,
                decoder_size: size * 2,
                encoder_offset: off,
                encoder_size: size,
                encoder_stride: Some(size + gap),
            };
            let mut sets = Vec::new();
            if let Ok(ws) = encoder_windows(end, &spec, k, n) {
                sets.push(ws);
            }
            if let Ok(ws) = decoder_windows(end, &spec, n) {
                sets.push(ws.to_vec());
            }
            for ws in sets {
                let comp = complement_frames(&ws, n);
                let mut counts = vec![0usize; n];
                for &t in &comp {
                    counts[t] += 1;
                }
                for win in &ws {
                    prop_assert!(!win.is_empty() && win.end <= n);
                    for t in win.start..win.end {
                        counts[t] += 1;
                    }
                }
                prop_assert!(counts.iter().all(|&c| c == 1));
            }
        }
    }
}
