//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked when the input is larger than this.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords: 128,
            seed: 0x6a63_6173,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `analytic` with `(f(x + h e_i) - f(x - h e_i)) / 2h` on every
/// coordinate (or a seeded random subset of `max_coords` of them). Relative
/// error uses `max(|analytic|, |numeric|, 1e-8)` as denominator. Coordinates
/// for which `skip` returns true (non-differentiable points such as clamps)
/// are counted but not compared.
pub fn finite_diff_check<T, F, S>(
    mut f: F,
    x: &[T],
    analytic: &[T],
    cfg: &GradCheckConfig,
    skip: S,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
    S: Fn(usize) -> bool,
{
    if !(1e-7..=1e-3).contains(&cfg.step) {
        return Err(Error::Config(format!("step {} outside [1e-7, 1e-3]", cfg.step)));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} inputs vs {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let coords: Vec<usize> = if x.len() <= cfg.max_coords {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = sample(&mut rng, x.len(), cfg.max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let h = T::lit(cfg.step);
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for i in coords {
        if skip(i) {
            report.skipped += 1;
            continue;
        }
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (up - down).as_f64() / (2.0 * cfg.step);
        let a = analytic[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
