//! ZLPR numerics and localizer quality.

use charedit_core::engine::Scale;
use charedit_core::localizer::corpus::{generate, split_holdout};
use charedit_core::localizer::{evaluate, localize, zlpr_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::time::Instant;

use crate::report::num;
use crate::{report, EvalError, ExperimentReport, Suite, Table, Workbench};

pub const ZLPR_CASES: usize = 1000;
pub const MAGNITUDES: [f64; 5] = [1.0, 10.0, 100.0, 1e3, 1e4];
pub const HOLDOUT_FRACTION: f64 = 0.2;
pub const MIN_F1: f64 = 0.95;

/// `ln(1 + Σ e^v)` with the exponent carried separately as an integer power of
/// two, so no term over- or underflows regardless of magnitude.
pub fn ln1p_sum_exp_extended(values: &[f64]) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    let mut terms: Vec<(f64, i64)> = vec![(1.0, 0)];
    for &v in values {
        let t = v / ln2;
        let k = t.floor();
        terms.push(((t - k).exp2(), k as i64));
    }
    let top = terms.iter().map(|t| t.1).max().expect("non-empty");
    let mantissa: f64 = terms
        .iter()
        .map(|&(m, k)| {
            let shift = k - top;
            if shift < -1100 {
                0.0
            } else {
                m * 2f64.powi(shift as i32)
            }
        })
        .sum();
    top as f64 * ln2 + mantissa.ln()
}

pub fn zlpr_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| !**p).map(|(s, _)| *s).collect();
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| **p).map(|(s, _)| -*s).collect();
    ln1p_sum_exp_extended(&neg) + ln1p_sum_exp_extended(&pos)
}

pub fn zlpr(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(wb.seed ^ 0x7a6c7072);
    let mut table = Table::new(&["magnitude", "cases", "max_rel_error", "nonfinite", "passed"]);
    let mut all = true;
    for (mi, &magnitude) in MAGNITUDES.iter().enumerate() {
        let cases = ZLPR_CASES / MAGNITUDES.len() + usize::from(mi < ZLPR_CASES % MAGNITUDES.len());
        let (mut worst, mut nonfinite, mut ok) = (0.0f64, 0usize, true);
        for _ in 0..cases {
            let n = rng.random_range(1..=19);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-magnitude..=magnitude)).collect();
            let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let (loss, grad) = zlpr_loss(&scores, &positive);
            let oracle = zlpr_oracle(&scores, &positive);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                nonfinite += 1;
                ok = false;
                continue;
            }
            let rel = (loss - oracle).abs() / oracle.abs().max(1.0);
            worst = worst.max(rel);
            ok &= rel <= 1e-10;
        }
        all &= ok;
        table.push(vec![num(magnitude), cases.to_string(), num(worst), nonfinite.to_string(), ok.to_string()]);
    }
    let detail =
        format!("{ZLPR_CASES} cases, |scores| up to 1e4, all within 1e-10 of the extended-range oracle: {all}");
    let config = json!({ "cases": ZLPR_CASES, "magnitudes": MAGNITUDES, "tolerance": 1e-10, "max_labels": 19 });
    Ok(report(Suite::Zlpr, wb, config, table, (all, detail), json!({})))
}

/// Held-out micro-F1 at both scales, recomputed from a regenerated corpus.
pub fn quality(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let mut table = Table::new(&[
        "scale",
        "labels",
        "holdout",
        "precision",
        "recall",
        "micro_f1",
        "matches_manifest",
        "non_uniform_masks",
        "passed",
    ]);
    let mut all = true;
    let mut timing = serde_json::Map::new();
    let mut detail = Vec::new();
    for scale in [Scale::Desk, Scale::Full] {
        let e = wb.engine(scale)?;
        let name = if scale == Scale::Desk { "desk" } else { "full" };
        let t = Instant::now();
        let examples = generate(&e.taxonomy, &e.manifest.build.corpus);
        let (_, holdout) = split_holdout(&examples, HOLDOUT_FRACTION, e.manifest.build.seed);
        let metrics = evaluate(&e.localizer, &holdout);
        let matches = metrics == e.manifest.localizer_holdout;
        let non_uniform = holdout
            .iter()
            .filter(|ex| {
                localize(&ex.text, Some(&e.localizer), &e.schema, Some(&e.lexicon)).mask.check(&e.schema).is_err()
            })
            .count();
        timing.insert(name.into(), json!(t.elapsed().as_secs_f64()));
        let ok = metrics.micro_f1 >= MIN_F1 && matches && non_uniform == 0;
        all &= ok;
        detail.push(format!("{name} F1 {:.4}", metrics.micro_f1));
        table.push(vec![
            name.into(),
            e.localizer.labels.len().to_string(),
            metrics.examples.to_string(),
            num(metrics.precision),
            num(metrics.recall),
            num(metrics.micro_f1),
            matches.to_string(),
            non_uniform.to_string(),
            ok.to_string(),
        ]);
    }
    let detail = format!("{} (threshold {MIN_F1}), masks group-uniform", detail.join(", "));
    let config = json!({ "holdout_fraction": HOLDOUT_FRACTION, "min_f1": MIN_F1 });
    Ok(report(Suite::Localizer, wb, config, table, (all, detail), serde_json::Value::Object(timing)))
}
