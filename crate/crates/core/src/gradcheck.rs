//! Central finite-difference gradient checking.
//!
//! Relative error between an analytic gradient `g` and the numerical estimate
//! `ĝ` is `‖g − ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂, floor)`; the floor keeps points with a
//! vanishing gradient from dividing by zero.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;
pub const NORM_FLOOR: f64 = 1e-6;

/// How the numerical gradient is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// Every coordinate: `2·dim` evaluations per point.
    Full,
    /// The gradient projected on this many random unit directions.
    Directions(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub points: usize,
    pub step: f64,
    pub threshold: f64,
    pub probe: Probe,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { points: 100, step: DEFAULT_STEP, threshold: PASS_THRESHOLD, probe: Probe::Full, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Index of the point with the largest error.
    pub worst_point: usize,
    pub threshold: f64,
    pub passed: bool,
    /// Evaluation failures (counted as failed points).
    pub errors: Vec<String>,
}

pub fn relative_error(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    let denom = analytic.norm().max(numeric.norm()).max(NORM_FLOOR);
    (analytic - numeric).norm() / denom
}

/// Checks `f` (value and gradient) at `cfg.points` inputs drawn by `sample`.
pub fn gradient_check<F, S, E>(name: &str, f: F, mut sample: S, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>), E>,
    S: FnMut(&mut ChaCha8Rng) -> DVector<f64>,
    E: std::fmt::Display,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0;
    let mut worst = 0;
    let mut errors = Vec::new();
    let value = |x: &DVector<f64>| f(x).map(|(v, _)| v);

    for p in 0..cfg.points {
        let x = sample(&mut rng);
        let outcome = (|| -> Result<f64, E> {
            let (_, grad) = f(&x)?;
            match cfg.probe {
                Probe::Full => {
                    let mut numeric = DVector::zeros(x.len());
                    for i in 0..x.len() {
                        let mut hi = x.clone();
                        let mut lo = x.clone();
                        hi[i] += cfg.step;
                        lo[i] -= cfg.step;
                        numeric[i] = (value(&hi)? - value(&lo)?) / (2.0 * cfg.step);
                    }
                    Ok(relative_error(&grad, &numeric))
                }
                Probe::Directions(k) => {
                    let mut analytic = DVector::zeros(k);
                    let mut numeric = DVector::zeros(k);
                    for d in 0..k {
                        let v = DVector::<f64>::from_fn(x.len(), |_, _| StandardNormal.sample(&mut rng));
                        let v = &v / v.norm();
                        analytic[d] = grad.dot(&v);
                        let hi = &x + &v * cfg.step;
                        let lo = &x - &v * cfg.step;
                        numeric[d] = (value(&hi)? - value(&lo)?) / (2.0 * cfg.step);
                    }
                    Ok(relative_error(&analytic, &numeric))
                }
            }
        })();
        let rel = match outcome {
            Ok(r) if r.is_finite() => r,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                errors.push(format!("point {p}: {e}"));
                f64::INFINITY
            }
        };
        if rel > max_rel {
            max_rel = rel;
            worst = p;
        }
        sum_rel += rel;
    }
    GradCheckReport {
        name: name.to_string(),
        points: cfg.points,
        max_rel_error: max_rel,
        mean_rel_error: if cfg.points > 0 { sum_rel / cfg.points as f64 } else { 0.0 },
        worst_point: worst,
        threshold: cfg.threshold,
        passed: cfg.points > 0 && errors.is_empty() && max_rel < cfg.threshold,
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn quartic(x: &DVector<f64>) -> Result<(f64, DVector<f64>), Infallible> {
        let v = x.iter().map(|a| a.powi(4) + a.sin()).sum();
        let g = x.map(|a| 4.0 * a.powi(3) + a.cos());
        Ok((v, g))
    }

    fn sample(rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(5, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn correct_gradient_passes() {
        let r = gradient_check("quartic", quartic, sample, &GradCheckConfig::default());
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn sign_flipped_gradient_fails() {
        let flipped = |x: &DVector<f64>| quartic(x).map(|(v, g)| (v, -g));
        let r = gradient_check("flipped", flipped, sample, &GradCheckConfig::default());
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }

    #[test]
    fn directional_probe_agrees() {
        let cfg = GradCheckConfig { probe: Probe::Directions(3), ..Default::default() };
        assert!(gradient_check("quartic", quartic, sample, &cfg).passed);
    }

    #[test]
    fn evaluation_errors_fail_the_check() {
        let failing = |_: &DVector<f64>| -> Result<(f64, DVector<f64>), String> { Err("boom".into()) };
        let r = gradient_check("failing", failing, sample, &GradCheckConfig { points: 2, ..Default::default() });
        assert!(!r.passed);
        assert_eq!(r.errors.len(), 2);
    }
}
