//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One evaluation of the function under test.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Branch signature of the evaluation (see [`super::Tape::branch_signature`]).
    /// Use a constant for smooth functions.
    pub signature: u64,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates to check; all of them when the parameter count is smaller.
    pub max_coords: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords: 256,
            seed: 0,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±ε perturbation changed the branch signature, so a
    /// central difference does not estimate the derivative there.
    pub skipped_kinks: usize,
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences `(f(x+ε) − f(x−ε)) / 2ε` on a seeded sample of coordinates.
pub fn grad_check<F>(mut f: F, params: &[f64], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return Err(Error::config(format!(
            "grad_check epsilon {} outside [1e-7, 1e-3]",
            cfg.epsilon
        )));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.value.to_bits() != again.value.to_bits()
        || base.signature != again.signature
        || base.grad.len() != again.grad.len()
        || base.grad.iter().zip(&again.grad).any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::CheckInvalid(
            "function is not deterministic".into(),
        ));
    }
    if base.grad.len() != params.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries for {} parameters",
            base.grad.len(),
            params.len()
        )));
    }

    let n = params.len();
    let coords: Vec<usize> = if n <= cfg.max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, n, cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut x = params.to_vec();
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + cfg.epsilon;
        let plus = f(&x)?;
        x[i] = orig - cfg.epsilon;
        let minus = f(&x)?;
        x[i] = orig;
        if plus.signature != base.signature || minus.signature != base.signature {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * cfg.epsilon);
        let analytic = base.grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (analytic - numeric).abs() / denom;
        if !rel.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient comparison at coordinate {i}"
            )));
        }
        report.checked += 1;
        if report.worst_coord.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = Some(i);
        }
    }
    if !coords.is_empty() && report.checked * 2 < coords.len() {
        return Err(Error::CheckInvalid(format!(
            "{} of {} coordinates sit on kinks at epsilon {}",
            report.skipped_kinks,
            coords.len(),
            cfg.epsilon
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn smooth(f: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> impl FnMut(&[f64]) -> Result<Probe> {
        move |x| {
            let (value, grad) = f(x);
            Ok(Probe {
                value,
                grad,
                signature: 0,
            })
        }
    }

    #[test]
    fn square_at_three() {
        let r = grad_check(
            smooth(|x| (x[0] * x[0], vec![2.0 * x[0]])),
            &[3.0],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(
            smooth(|x| (4.0, vec![0.0; x.len()])),
            &[1.0, -2.0, 0.3],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(
            smooth(|x| (x[0].sin(), vec![x[0].sin()])),
            &[0.7],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn nondeterminism_is_rejected() {
        let calls = Cell::new(0.0);
        let f = |x: &[f64]| {
            calls.set(calls.get() + 1.0);
            Ok(Probe {
                value: x[0] + calls.get(),
                grad: vec![1.0],
                signature: 0,
            })
        };
        assert!(matches!(
            grad_check(f, &[0.0], &GradCheckConfig::default()),
            Err(Error::CheckInvalid(_))
        ));
    }

    #[test]
    fn epsilon_range_enforced() {
        let cfg = GradCheckConfig {
            epsilon: 1e-2,
            ..Default::default()
        };
        assert!(matches!(
            grad_check(smooth(|x| (x[0], vec![1.0])), &[0.0], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kinks_are_skipped() {
        // |x| evaluated right at the kink, other coordinates smooth
        let f = |x: &[f64]| {
            Ok(Probe {
                value: x[0].abs() + x[1] * x[1],
                grad: vec![x[0].signum(), 2.0 * x[1]],
                signature: u64::from(x[0] > 0.0),
            })
        };
        let r = grad_check(f, &[1e-9, 2.0], &GradCheckConfig::default()).unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-8);
    }
}
