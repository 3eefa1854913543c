//! Same-length temporal convolution with zero extension at the edges.

use crate::error::{Error, Result};

/// `out[t] = Σ_k kernel[k] · signal[t + h − k]`, `h = (len − 1) / 2`,
/// reading zero outside `[0, signal.len())`.
pub fn convolve_time(signal: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    check_kernel(kernel)?;
    if signal.is_empty() {
        return Err(Error::data("convolution of an empty signal"));
    }
    Ok(convolve_unchecked(signal, kernel))
}

pub(crate) fn check_kernel(kernel: &[f64]) -> Result<()> {
    if kernel.len() % 2 == 0 {
        return Err(Error::config(format!(
            "kernel length must be odd, got {}",
            kernel.len()
        )));
    }
    Ok(())
}

pub(crate) fn convolve_unchecked(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = signal.len() as isize;
    let h = (kernel.len() / 2) as isize;
    (0..n)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, w)| {
                    let s = t + h - k as isize;
                    (0..n).contains(&s).then(|| w * signal[s as usize])
                })
                .sum()
        })
        .collect()
}

/// Adjoint of [`convolve_unchecked`]: correlation of `grad_out` with the
/// kernel, i.e. convolution with the flipped kernel.
pub(crate) fn convolve_backward(grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = grad_out.len() as isize;
    let h = (kernel.len() / 2) as isize;
    (0..n)
        .map(|s| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, w)| {
                    let t = s - h + k as isize;
                    (0..n).contains(&t).then(|| w * grad_out[t as usize])
                })
                .sum()
        })
        .collect()
}
