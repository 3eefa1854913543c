//! Loss terms over a `frames × classes` posterior matrix recorded on a tape.

use super::kernel::Kernel;
use super::window::{complement_frames, PoolingWindow};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub(crate) fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn dims(tape: &Tape, y: Var) -> Result<(usize, usize)> {
    tape.value(y).dims2()
}

/// `(Σ_{c_t ≠ 0} −log y_{c_t}(t), Σ_{c_t = 0} −log y_0(t))`.
pub fn ce_loss_split(tape: &mut Tape, y: Var, labels: &[u16]) -> Result<(Var, Var)> {
    let (frames, classes) = dims(tape, y)?;
    if labels.len() != frames {
        return Err(Error::data(format!("{} labels for {frames} frames", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (t, &l) in labels.iter().enumerate() {
        let idx = t * classes + usize::from(l);
        if l == 0 { neg.push(idx) } else { pos.push(idx) }
    }
    Ok((tape.neg_log_sum(y, pos)?, tape.neg_log_sum(y, neg)?))
}

/// Frame cross entropy `Σ_t −log y_{c_t}(t)`.
pub fn ce_loss(tape: &mut Tape, y: Var, labels: &[u16]) -> Result<Var> {
    let (pos, neg) = ce_loss_split(tape, y, labels)?;
    tape.add(pos, neg)
}

/// Time-smoothed trace of output `dim`, a vector of length `frames`.
pub fn smooth_posteriors(tape: &mut Tape, y: Var, dim: usize, kernel: &Kernel) -> Result<Var> {
    let column = tape.column(y, dim)?;
    tape.convolve(column, kernel.shared_taps())
}

#[derive(Debug, Clone)]
pub struct PooledLoss {
    pub loss: Var,
    /// Selected frame per window, in window order.
    pub argmax: Vec<usize>,
}

/// `Σ_i −log ỹ_i(m(i))` with `m(i)` the earliest maximizer of the smoothed
/// trace inside window `i`. `kernel = None` pools the raw posteriors.
pub fn pooled_positive_loss(
    tape: &mut Tape,
    y: Var,
    windows: &[PoolingWindow],
    kernel: Option<&Kernel>,
) -> Result<PooledLoss> {
    let (frames, classes) = dims(tape, y)?;
    let mut loss = zero(tape);
    let mut argmax = Vec::with_capacity(windows.len());
    for w in windows {
        if w.is_empty() {
            return Err(Error::data(format!("empty pooling window [{}, {})", w.start, w.end)));
        }
        if w.end > frames || w.dim >= classes {
            return Err(Error::data(format!(
                "window [{}, {}) on output {} outside {frames} × {classes} posteriors",
                w.start, w.end, w.dim
            )));
        }
        let trace = match kernel {
            Some(k) => smooth_posteriors(tape, y, w.dim, k)?,
            None => tape.column(y, w.dim)?,
        };
        let values = tape.value(trace).data();
        let mut m = w.start;
        for t in w.start + 1..w.end {
            if values[t] > values[m] {
                m = t;
            }
        }
        tape.note_branch(((w.dim as u64) << 32) ^ m as u64);
        argmax.push(m);
        let term = tape.neg_log_sum(trace, vec![m])?;
        loss = tape.add(loss, term)?;
    }
    Ok(PooledLoss { loss, argmax })
}

/// `Σ_{t ∉ ∪ windows} −log y_background(t)`.
pub fn negative_loss(tape: &mut Tape, y: Var, windows: &[PoolingWindow], background: usize) -> Result<Var> {
    let (frames, classes) = dims(tape, y)?;
    if background >= classes {
        return Err(Error::data(format!("background class {background} of {classes}")));
    }
    let idx = complement_frames(windows, frames)
        .into_iter()
        .map(|t| t * classes + background)
        .collect();
    tape.neg_log_sum(y, idx)
}
