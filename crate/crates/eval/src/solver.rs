//! Solver and latent-space suites.

use charedit_core::engine::{Engine, Scale};
use charedit_core::latent::prior_loss;
use charedit_core::schema::{snap_discrete, ParameterVector};
use charedit_core::solver::{create, edit, strength_weight, SolveConfig};
use nalgebra::DVector;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;
use std::time::Instant;

use crate::gradients::gaussian;
use crate::report::num;
use crate::{report, EvalError, ExperimentReport, Suite, Table, Workbench};

pub const MASK_CALLS: usize = 1000;
/// Grid of the monotonicity check; s = 0 is a no-op and is checked elsewhere.
pub const STRENGTH_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
/// The gated curve: the canonical nose edit, at both scales.
pub const STRENGTH_CASE: (&str, &str) = ("nose", "bigger nose");

/// `(label, prompt)` for every label, built from its first modifier.
pub fn label_prompts(e: &Engine) -> Vec<(String, String)> {
    e.taxonomy.labels.iter().filter_map(|l| l.adjectives().next().map(|a| (l.key.clone(), l.prompt_for(a)))).collect()
}

fn mean_face(e: &Engine) -> ParameterVector {
    snap_discrete(&e.latent.decode(&e.prior.mu_z).expect("mean decodes"), &e.schema)
}

/// A random legal face near the prior mean.
fn random_face(e: &Engine, rng: &mut ChaCha8Rng) -> ParameterVector {
    let z = &e.prior.mu_z + gaussian(rng, e.latent.dim(), 0.3);
    snap_discrete(&e.latent.decode(&z).expect("decodes"), &e.schema)
}

/// Randomized edit calls; every unmasked channel must keep its exact bits.
pub fn masks(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let e = wb.engine(Scale::Full)?;
    let m = e.models();
    let mut rng = ChaCha8Rng::seed_from_u64(wb.seed ^ 0x6d61736b);
    let labels = e.schema.labels();
    let prompts = label_prompts(&e);
    let mut table =
        Table::new(&["call", "labels", "prompt", "strength", "steps", "masked", "changed", "violations", "status"]);
    let mut violations = 0usize;
    let mut failures = 0usize;
    let mut x = random_face(&e, &mut rng);
    let t = Instant::now();
    for call in 0..MASK_CALLS {
        if rng.random_bool(0.3) {
            x = random_face(&e, &mut rng);
        }
        let k = rng.random_range(1..=3);
        let chosen: Vec<&String> = labels.choose_multiple(&mut rng, k).collect();
        let mask = e.schema.label_mask(chosen.iter().map(|s| s.as_str()));
        let (_, prompt) = prompts.choose(&mut rng).expect("prompts");
        let strength = if rng.random_bool(0.05) { 0.0 } else { rng.random_range(0.0..=1.0) };
        let cfg = SolveConfig { steps: rng.random_range(1..=30), seed: call as u64, ..SolveConfig::default() };
        let names = chosen.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+");
        let mut row = vec![call.to_string(), names, prompt.clone(), num(strength), cfg.steps.to_string()];
        match edit(&x, prompt, strength, &mask, &cfg, &m) {
            Ok(res) => {
                let (mut changed, mut bad) = (0, 0);
                for i in 0..x.len() {
                    if res.x_final.0[i].to_bits() != x.0[i].to_bits() {
                        if mask.bits[i] {
                            changed += 1;
                        } else {
                            bad += 1;
                        }
                    }
                }
                violations += bad;
                row.extend([mask.count().to_string(), changed.to_string(), bad.to_string(), "ok".into()]);
                x = res.x_final;
            }
            Err(err) => {
                failures += 1;
                row.extend([mask.count().to_string(), "0".into(), "0".into(), format!("error: {err}")]);
            }
        }
        table.push(row);
    }
    let passed = violations == 0 && failures == 0;
    let detail = format!("{MASK_CALLS} edit calls, {violations} unmasked channels changed, {failures} failed calls");
    let config = json!({ "scale": "full", "calls": MASK_CALLS, "labels_per_call": [1, 3], "steps": [1, 30] });
    Ok(report(Suite::Masks, wb, config, table, (passed, detail), json!({ "secs": t.elapsed().as_secs_f64() })))
}

/// Masked-block displacement norms over [`STRENGTH_GRID`]; `None` marks the
/// first grid point where the curve decreases.
fn displacement_curve(
    e: &Engine,
    label: &str,
    prompt: &str,
    cfg: &SolveConfig,
) -> Result<(Vec<(f64, f64, f64)>, Option<f64>), EvalError> {
    let m = e.models();
    let x0 = mean_face(e);
    let mask = e.schema.label_mask([label]);
    let mut curve = Vec::new();
    let mut first_drop = None;
    for s in STRENGTH_GRID {
        let res = edit(&x0, prompt, s, &mask, cfg, &m).map_err(|err| EvalError::Failed(err.to_string()))?;
        let d = mask.indices().iter().map(|&i| (res.x_final.0[i] - x0.0[i]).powi(2)).sum::<f64>().sqrt();
        if first_drop.is_none() && curve.last().is_some_and(|&(_, prev, _)| d < prev) {
            first_drop = Some(s);
        }
        curve.push((s, d, res.loss_trace.last().map_or(f64::NAN, |p| p.clip)));
    }
    Ok((curve, first_drop))
}

/// Weight table, the gated displacement curve at both scales, and an
/// ungated survey over every full-scale label.
pub fn strength(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [(0.0, 0.0), (0.25, 1.0 - half), (0.5, 1.0), (0.75, 1.0 + half), (1.0, 2.0)];
    let mut table =
        Table::new(&["kind", "scale", "label", "prompt", "s", "value", "expected", "abs_error", "final_clip", "gated"]);
    let mut formula_ok = true;
    for (s, want) in expected {
        let got = strength_weight(s);
        let err = (got - want).abs();
        formula_ok &= err <= 1e-12;
        let row = ["weight", "", "", "", &num(s), &num(got), &num(want), &num(err), "", "true"];
        table.push(row.map(String::from).to_vec());
    }
    let cfg = SolveConfig { seed: wb.seed, ..SolveConfig::default() };
    let t = Instant::now();
    let mut push_curve = |scale: &str, label: &str, prompt: &str, curve: &[(f64, f64, f64)], gated: bool| {
        for &(s, d, clip) in curve {
            let row = ["displacement", scale, label, prompt, &num(s), &num(d), "", "", &num(clip), &gated.to_string()];
            table.push(row.map(String::from).to_vec());
        }
    };
    let (label, prompt) = STRENGTH_CASE;
    let mut monotone = true;
    for (scale, name) in [(Scale::Desk, "desk"), (Scale::Full, "full")] {
        let (curve, drop) = displacement_curve(&*wb.engine(scale)?, label, prompt, &cfg)?;
        monotone &= drop.is_none();
        push_curve(name, label, prompt, &curve, true);
    }
    let e = wb.engine(Scale::Full)?;
    let mut drops = Vec::new();
    let prompts = label_prompts(&e);
    for (label, prompt) in &prompts {
        let (curve, drop) = displacement_curve(&e, label, prompt, &cfg)?;
        if let Some(s) = drop {
            drops.push(format!("{label}@{s}"));
        }
        push_curve("full", label, prompt, &curve, false);
    }
    let passed = formula_ok && monotone;
    let detail = format!(
        "weights within 1e-12: {formula_ok}; \"{prompt}\" displacement non-decreasing in s at desk and full scale: {monotone}; \
         survey: {}/{} full-scale labels monotone {drops:?}",
        prompts.len() - drops.len(),
        prompts.len()
    );
    let config =
        json!({ "gated_case": STRENGTH_CASE, "scales": ["desk", "full"], "grid": STRENGTH_GRID, "solver": cfg });
    Ok(report(Suite::Strength, wb, config, table, (passed, detail), json!({ "secs": t.elapsed().as_secs_f64() })))
}

pub const ROUNDTRIP_SAMPLES: usize = 1000;

/// Dimensions and in-span round trips at full scale.
pub fn latent(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let e = wb.engine(Scale::Full)?;
    let mut rng = ChaCha8Rng::seed_from_u64(wb.seed ^ 0x6c6174);
    let k = e.latent.n_components();
    let base = e.latent.encode(&mean_face(&e)).map_err(|err| EvalError::Failed(err.to_string()))?;
    let mut worst = 0.0f64;
    for _ in 0..ROUNDTRIP_SAMPLES {
        let mut z: DVector<f64> = base.clone();
        for c in 0..k {
            let v: f64 = StandardNormal.sample(&mut rng);
            z[c] = v;
        }
        let x = e.latent.decode(&z).map_err(|err| EvalError::Failed(err.to_string()))?;
        let back = e.latent.decode(&e.latent.encode(&x).map_err(|err| EvalError::Failed(err.to_string()))?);
        let back = back.map_err(|err| EvalError::Failed(err.to_string()))?;
        worst = worst.max((&back.0 - &x.0).amax());
    }
    let mut table = Table::new(&["quantity", "value"]);
    let rows = [
        ("channels", e.schema.len().to_string()),
        ("bone_channels", e.schema.bone_channels().len().to_string()),
        ("pca_components", k.to_string()),
        ("latent_dim", e.latent.dim().to_string()),
        ("orthonormality_error", num(e.latent.orthonormality_error())),
        ("roundtrip_samples", ROUNDTRIP_SAMPLES.to_string()),
        ("roundtrip_max_abs_error", num(worst)),
    ];
    for (q, v) in rows {
        table.push(vec![q.into(), v]);
    }
    let passed = e.latent.dim() == 226 && worst < 1e-6;
    let detail = format!("M = {}; max round-trip error {worst:.3e} over {ROUNDTRIP_SAMPLES} samples", e.latent.dim());
    Ok(report(Suite::Latent, wb, json!({ "scale": "full" }), table, (passed, detail), json!({})))
}

pub const PRIOR_PROMPTS: usize = 10;

/// `create` with and without the prior term.
pub fn prior(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let e = wb.engine(Scale::Full)?;
    let m = e.models();
    let with = SolveConfig { seed: wb.seed, ..SolveConfig::default() };
    let without = SolveConfig { lambda_prior: 0.0, ..with };
    let mut table =
        Table::new(&["prompt", "prior_with", "prior_without", "clip_with", "clip_without", "strictly_lower"]);
    let mut all = true;
    let t = Instant::now();
    for (_, prompt) in label_prompts(&e).into_iter().take(PRIOR_PROMPTS) {
        let a = create(&prompt, &with, &m).map_err(|err| EvalError::Failed(err.to_string()))?;
        let b = create(&prompt, &without, &m).map_err(|err| EvalError::Failed(err.to_string()))?;
        let pa = prior_loss(&DVector::from_vec(a.z_final.clone()), &e.prior).0;
        let pb = prior_loss(&DVector::from_vec(b.z_final.clone()), &e.prior).0;
        let clip = |r: &charedit_core::solver::SolveResult| r.loss_trace.last().map_or(f64::NAN, |p| p.clip);
        all &= pa < pb;
        table.push(vec![prompt, num(pa), num(pb), num(clip(&a)), num(clip(&b)), (pa < pb).to_string()]);
    }
    let detail =
        format!("final prior strictly lower with lambda = {} on all {PRIOR_PROMPTS} prompts: {all}", with.lambda_prior);
    let config = json!({ "scale": "full", "with": with, "without": without });
    Ok(report(Suite::Prior, wb, config, table, (all, detail), json!({ "secs": t.elapsed().as_secs_f64() })))
}
