use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric, unit-sum smoothing filter over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    taps: Arc<[f64]>,
    sigma: f64,
}

impl Kernel {
    /// Single unit tap; smoothing with it is the identity.
    pub fn delta() -> Self {
        Self {
            taps: Arc::from([1.0]),
            sigma: 0.0,
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub(crate) fn shared_taps(&self) -> Arc<[f64]> {
        Arc::clone(&self.taps)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Truncated Gaussian `exp(−t²/2σ²)` on `t ∈ [−(L−1)/2, (L−1)/2]`,
/// normalized to unit sum. `σ = ∞` gives the boxcar `1/L`.
pub fn make_gaussian_kernel(sigma: f64, length: usize) -> Result<Kernel> {
    if length % 2 == 0 {
        return Err(Error::config(format!("kernel length {length} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("kernel sigma {sigma} must be positive")));
    }
    let half = (length / 2) as f64;
    let raw: Vec<f64> = (0..length)
        .map(|i| {
            let t = i as f64 - half;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let mut taps: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // exact mirror symmetry regardless of rounding in the division
    for i in 0..length / 2 {
        taps[length - 1 - i] = taps[i];
    }
    Ok(Kernel {
        taps: taps.into(),
        sigma,
    })
}

/// Serialized form of a Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub sigma: f64,
    pub length: usize,
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel> {
        if self.length == 1 {
            return Ok(Kernel::delta());
        }
        make_gaussian_kernel(self.sigma, self.length)
    }
}
