//! Detection events, FR against FA per hour, operating points and the
//! ablation report.

mod report;
mod svg;

pub use report::{ablation_report, apply_condition, roc_csv, AblationConfig, AblationReport, AblationRow, Condition, ModelEntry};
pub use svg::roc_svg;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::model::{batch_forward, full_forward_streaming, ModelParams, StreamingState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Frames before the keyword end that still count as a hit.
    pub tolerance_before: usize,
    /// Frames after the keyword end that still count as a hit.
    pub tolerance_after: usize,
    /// Frames during which further firings are suppressed after a detection.
    pub suppression: usize,
    pub target_fa_per_hour: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance_before: 50,
            tolerance_after: 75,
            suppression: 100,
            target_fa_per_hour: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.suppression == 0 {
            return Err(Error::config("suppression window must be at least 1 frame"));
        }
        if !(self.target_fa_per_hour >= 0.0) {
            return Err(Error::config("target FA/h must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub utterance: u32,
    pub frame: usize,
    pub score: f64,
}

/// Fires at the first frame with `score ≥ threshold`, then ignores the next
/// `suppression − 1` frames.
pub fn detect(utterance: u32, scores: &[f64], threshold: f64, suppression: usize) -> Result<Vec<Detection>> {
    if suppression == 0 {
        return Err(Error::config("suppression window must be at least 1 frame"));
    }
    Ok(detection_frames(scores, threshold, suppression)
        .into_iter()
        .map(|frame| Detection {
            utterance,
            frame,
            score: scores[frame],
        })
        .collect())
}

fn detection_frames(scores: &[f64], threshold: f64, suppression: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut next = 0;
    for (t, &s) in scores.iter().enumerate() {
        if t >= next && s >= threshold {
            out.push(t);
            next = t + suppression;
        }
    }
    out
}

/// Per-frame keyword score: decoder output 1, computed frame by frame with
/// streaming state.
pub fn score_utterance(features: &FeatureSequence, params: &ModelParams) -> Result<Vec<f64>> {
    let mut state = StreamingState::new(params.config());
    let (_, dec) = full_forward_streaming(features, params, &mut state)?;
    Ok((0..dec.rows()).map(|t| dec.at(t, 1)).collect())
}

/// Keyword score trace of one utterance with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUtterance {
    pub id: u32,
    pub scores: Vec<f64>,
    /// Present for positives.
    pub keyword_end: Option<usize>,
}

impl ScoredUtterance {
    fn tolerance(&self, cfg: &EvalConfig) -> Option<(usize, usize)> {
        let e = self.keyword_end?;
        let lo = e.saturating_sub(cfg.tolerance_before);
        let hi = (e + cfg.tolerance_after + 1).min(self.scores.len());
        (lo < hi).then_some((lo, hi))
    }

    /// Highest score inside the hit tolerance window (positives) or over
    /// the whole utterance (negatives).
    pub fn peak(&self, cfg: &EvalConfig) -> f64 {
        let range = match self.keyword_end {
            Some(_) => match self.tolerance(cfg) {
                Some((lo, hi)) => &self.scores[lo..hi],
                None => &[][..],
            },
            None => &self.scores[..],
        };
        range.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// A positive is detected when its score reaches the threshold anywhere
    /// inside the tolerance window.
    pub fn is_hit(&self, threshold: f64, cfg: &EvalConfig) -> bool {
        self.keyword_end.is_some() && self.peak(cfg) >= threshold
    }
}

/// Scores every utterance (in parallel, output in input order).
pub fn score_dataset(data: &[Utterance], params: &ModelParams) -> Result<Vec<ScoredUtterance>> {
    data.par_iter()
        .map(|u| {
            Ok(ScoredUtterance {
                id: u.id,
                scores: score_utterance(&u.features, params)?,
                keyword_end: u.annotation.keyword_end(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fr: f64,
    pub fa_per_hour: f64,
}

/// FR and FA/h at one threshold.
pub fn roc_point(
    positives: &[ScoredUtterance],
    negatives: &[ScoredUtterance],
    negative_hours: f64,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<RocPoint> {
    check_sweep_inputs(positives, negatives, negative_hours, cfg)?;
    Ok(point_unchecked(positives, negatives, negative_hours, threshold, cfg))
}

fn point_unchecked(
    positives: &[ScoredUtterance],
    negatives: &[ScoredUtterance],
    negative_hours: f64,
    threshold: f64,
    cfg: &EvalConfig,
) -> RocPoint {
    let misses = positives.iter().filter(|p| !p.is_hit(threshold, cfg)).count();
    let fa: usize = negatives
        .iter()
        .map(|n| detection_frames(&n.scores, threshold, cfg.suppression).len())
        .sum();
    RocPoint {
        threshold,
        fr: misses as f64 / positives.len() as f64,
        fa_per_hour: fa as f64 / negative_hours,
    }
}

fn check_sweep_inputs(
    positives: &[ScoredUtterance],
    negatives: &[ScoredUtterance],
    negative_hours: f64,
    cfg: &EvalConfig,
) -> Result<()> {
    cfg.validate()?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::config("the sweep needs at least one positive and one negative utterance"));
    }
    if positives.iter().any(|p| p.keyword_end.is_none()) || negatives.iter().any(|n| n.keyword_end.is_some()) {
        return Err(Error::data("positive/negative sets mixed up"));
    }
    if !(negative_hours > 0.0) {
        return Err(Error::config("negative audio has zero duration"));
    }
    Ok(())
}

/// Score values at which the number of detections on `scores` grows as the
/// threshold is lowered, strictest first. Below the last one the count no
/// longer changes.
pub fn fa_breakpoints(scores: &[f64], suppression: usize) -> Vec<f64> {
    let mut values: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values.dedup();
    let count = |i: usize| detection_frames(scores, values[i], suppression).len();
    let mut out = Vec::new();
    // The count is non-decreasing along `values`; bisect every jump.
    let mut stack = Vec::new();
    if let Some(last) = values.len().checked_sub(1) {
        let c0 = count(0);
        out.push(0);
        stack.push((0, c0, last, count(last)));
    }
    while let Some((lo, clo, hi, chi)) = stack.pop() {
        if clo == chi || hi == lo + 1 {
            if clo != chi {
                out.push(hi);
            }
            continue;
        }
        let mid = lo + (hi - lo) / 2;
        let cm = count(mid);
        stack.push((lo, clo, mid, cm));
        stack.push((mid, cm, hi, chi));
    }
    out.sort_unstable();
    out.into_iter().map(|i| values[i]).collect()
}

/// Thresholds at which the ROC is evaluated, strictest first: one above the
/// highest critical value (when that is below 1), midpoints between
/// consecutive distinct critical values, the lowest one, and 0. Critical
/// values are the positives' in-window peaks and the negatives'
/// [`fa_breakpoints`], so every reachable (FR, FA) pair appears.
pub fn sweep_thresholds(positives: &[ScoredUtterance], negatives: &[ScoredUtterance], cfg: &EvalConfig) -> Vec<f64> {
    let mut peaks: Vec<f64> = positives
        .iter()
        .map(|u| u.peak(cfg))
        .chain(negatives.iter().flat_map(|u| fa_breakpoints(&u.scores, cfg.suppression)))
        .filter(|p| p.is_finite())
        .map(|p| p.clamp(0.0, 1.0))
        .collect();
    peaks.sort_by(|a, b| b.total_cmp(a));
    peaks.dedup();
    let mut out = Vec::with_capacity(peaks.len() + 2);
    if let Some(&top) = peaks.first() {
        if top < 1.0 {
            out.push(0.5 * (top + 1.0));
        }
    }
    for w in peaks.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
    }
    if let Some(&low) = peaks.last() {
        out.push(low);
        if low > 0.0 {
            out.push(0.0);
        }
    }
    if out.is_empty() {
        out.push(0.0);
    }
    out
}

/// ROC over [`sweep_thresholds`], strictest threshold first.
pub fn fa_fr_sweep(
    positives: &[ScoredUtterance],
    negatives: &[ScoredUtterance],
    negative_hours: f64,
    cfg: &EvalConfig,
) -> Result<Vec<RocPoint>> {
    check_sweep_inputs(positives, negatives, negative_hours, cfg)?;
    Ok(sweep_thresholds(positives, negatives, cfg)
        .into_par_iter()
        .map(|t| point_unchecked(positives, negatives, negative_hours, t, cfg))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fr: f64,
    pub fa_per_hour: f64,
    /// `false` when no point met the target and the strictest was returned.
    pub target_met: bool,
}

/// Smallest threshold whose FA/h is within `target`; falls back to the
/// strictest point, flagged.
pub fn operating_point(roc: &[RocPoint], target_fa_per_hour: f64) -> Result<OperatingPoint> {
    if roc.is_empty() {
        return Err(Error::config("empty ROC"));
    }
    let pick = |p: &RocPoint, met| OperatingPoint {
        threshold: p.threshold,
        fr: p.fr,
        fa_per_hour: p.fa_per_hour,
        target_met: met,
    };
    let best = roc
        .iter()
        .filter(|p| p.fa_per_hour <= target_fa_per_hour)
        .min_by(|a, b| a.threshold.total_cmp(&b.threshold));
    Ok(match best {
        Some(p) => pick(p, true),
        None => pick(
            roc.iter().max_by(|a, b| a.threshold.total_cmp(&b.threshold)).expect("non-empty"),
            false,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub positives: usize,
    pub negatives: usize,
    pub negative_hours: f64,
    pub operating_point: OperatingPoint,
    /// The strictest threshold with zero false accepts.
    pub zero_fa_point: OperatingPoint,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

/// Scores `data`, sweeps the ROC and picks the operating points.
pub fn evaluate(params: &ModelParams, data: &[Utterance], cfg: &EvalConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let scored = score_dataset(data, params)?;
    let (pos, neg): (Vec<_>, Vec<_>) = scored.into_iter().partition(|s| s.keyword_end.is_some());
    let hours: f64 = data
        .iter()
        .filter(|u| !u.annotation.is_positive())
        .map(|u| u.features.duration_hours())
        .sum();
    let roc = fa_fr_sweep(&pos, &neg, hours, cfg)?;
    Ok(EvalSummary {
        positives: pos.len(),
        negatives: neg.len(),
        negative_hours: hours,
        operating_point: operating_point(&roc, cfg.target_fa_per_hour)?,
        zero_fa_point: operating_point(&roc, 0.0)?,
        roc,
    })
}

/// Fraction of labelled frames whose encoder argmax equals the frame label.
pub fn encoder_frame_accuracy(params: &ModelParams, data: &[Utterance]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .map(|u| {
            let Some(labels) = u.annotation.labels() else {
                return Ok((0, 0));
            };
            let (enc, _) = batch_forward(params, &u.features)?;
            let right = labels
                .iter()
                .enumerate()
                .filter(|&(t, &l)| {
                    let row = enc.row(t);
                    let arg = (0..row.len()).fold(0, |m, c| if row[c] > row[m] { c } else { m });
                    arg == usize::from(l)
                })
                .count();
            Ok((right, labels.len()))
        })
        .collect::<Result<_>>()?;
    let (right, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(Error::data("no labelled frames to score"));
    }
    Ok(right as f64 / total as f64)
}
