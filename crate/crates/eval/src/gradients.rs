//! Central finite-difference checks of every analytic gradient, probing all
//! coordinates at both scales.

use std::convert::Infallible;
use std::time::Instant;

use charedit_core::engine::{Engine, Scale};
use charedit_core::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, Probe};
use charedit_core::latent::{prior_loss, LatentError};
use charedit_core::localizer::zlpr_loss;
use charedit_core::schema::{snap_discrete, ParameterVector};
use charedit_core::semantic::clip_loss;
use charedit_core::solver::objective_eval;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::report::num;
use crate::{report, EvalError, ExperimentReport, Suite, Table, Workbench};

/// Runtime budget for the whole suite.
pub const BUDGET_SECS: f64 = 60.0;

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig { probe: Probe::Full, seed, ..Default::default() }
}

pub fn check_prior(e: &Engine, seed: u64) -> GradCheckReport {
    let mu = e.prior.mu_z.clone();
    gradient_check(
        "prior_loss",
        |z| Ok::<_, Infallible>(prior_loss(z, &e.prior)),
        |rng| &mu + gaussian(rng, mu.len(), 0.5),
        &cfg(seed),
    )
}

pub fn check_clip(e: &Engine, seed: u64) -> GradCheckReport {
    let mu = e.latent.decode(&e.prior.mu_z).expect("mean decodes");
    gradient_check(
        "clip_loss",
        |x| {
            clip_loss("bigger nose", &ParameterVector(x.clone()), e.renderer.as_ref(), e.embedder.as_ref())
                .map(|c| (c.value, c.grad))
        },
        |rng| &mu.0 + gaussian(rng, mu.len(), 0.3),
        &cfg(seed),
    )
}

pub fn check_decode_vjp(e: &Engine, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let upstream = gaussian(&mut rng, e.schema.len(), 1.0);
    gradient_check(
        "decode_vjp",
        |z| {
            let x = e.latent.decode(z)?;
            Ok::<_, LatentError>((x.0.dot(&upstream), e.latent.decode_vjp(&upstream)?))
        },
        |rng| gaussian(rng, e.latent.dim(), 1.0),
        &cfg(seed),
    )
}

pub fn check_objective(e: &Engine, seed: u64) -> GradCheckReport {
    let m = e.models();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let x_prev = snap_discrete(&e.latent.decode(&e.prior.mu_z).expect("mean decodes"), &e.schema);
    let mut labels: Vec<String> = e.schema.labels().into_iter().filter(|_| rng.random_bool(0.5)).collect();
    if labels.is_empty() {
        labels.push(e.schema.labels()[0].clone());
    }
    let mask = e.schema.label_mask(labels.iter().map(String::as_str));
    let target = e.embedder.embed_text("darker eyeshadow").expect("embeds");
    let mu = e.prior.mu_z.clone();
    gradient_check(
        "objective_eval",
        |z| objective_eval(z, &x_prev, &mask, &target, 1.3, 8e-4, &m).map(|o| (o.total, o.grad)),
        |rng| &mu + gaussian(rng, mu.len(), 0.3),
        &cfg(seed),
    )
}

/// ZLPR over 19 labels with score spreads from 0.1 to 30.
pub fn check_zlpr(seed: u64) -> GradCheckReport {
    gradient_check(
        "zlpr_loss",
        |s| {
            let positive: Vec<bool> = (0..s.len()).map(|i| i % 3 == 0).collect();
            let (v, g) = zlpr_loss(s.as_slice(), &positive);
            Ok::<_, Infallible>((v, DVector::from_vec(g)))
        },
        |rng| {
            let spread = [0.1, 1.0, 5.0, 30.0][rng.random_range(0..4)];
            gaussian(rng, 19, spread)
        },
        &cfg(seed),
    )
}

pub fn run(wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    let mut table =
        Table::new(&["scale", "function", "dim", "points", "max_rel_error", "mean_rel_error", "threshold", "passed"]);
    let mut timing = serde_json::Map::new();
    let mut all = true;
    let t_all = Instant::now();
    let mut record = |scale: &str, dim: usize, r: GradCheckReport, secs: f64| {
        all &= r.passed && r.errors.is_empty() && r.points >= 100;
        timing.insert(format!("{scale}/{}", r.name), json!(secs));
        table.push(vec![
            scale.into(),
            r.name,
            dim.to_string(),
            r.points.to_string(),
            num(r.max_rel_error),
            num(r.mean_rel_error),
            num(r.threshold),
            r.passed.to_string(),
        ]);
    };
    for scale in [Scale::Desk, Scale::Full] {
        let e = wb.engine(scale)?;
        let name = if scale == Scale::Desk { "desk" } else { "full" };
        let s = wb.seed.wrapping_mul(31);
        let checks: [(usize, &dyn Fn() -> GradCheckReport); 4] = [
            (e.latent.dim(), &|| check_prior(&e, s)),
            (e.schema.len(), &|| check_clip(&e, s + 1)),
            (e.latent.dim(), &|| check_decode_vjp(&e, s + 2)),
            (e.latent.dim(), &|| check_objective(&e, s + 3)),
        ];
        for (dim, check) in checks {
            let t = Instant::now();
            let r = check();
            record(name, dim, r, t.elapsed().as_secs_f64());
        }
    }
    let t = Instant::now();
    record("n/a", 19, check_zlpr(wb.seed), t.elapsed().as_secs_f64());
    // engine builds are not part of the budget
    let total: f64 = timing.values().filter_map(|v| v.as_f64()).sum();
    timing.insert("checks_total_secs".into(), json!(total));
    timing.insert("wall_secs_including_engine_builds".into(), json!(t_all.elapsed().as_secs_f64()));
    let passed = all && total < BUDGET_SECS;
    let detail = format!("all checks below 1e-4 relative error: {all}; runtime {total:.1} s (budget {BUDGET_SECS} s)");
    let config = json!({ "points": 100, "probe": "full", "step": charedit_core::gradcheck::DEFAULT_STEP, "threshold": charedit_core::gradcheck::PASS_THRESHOLD });
    Ok(report(Suite::Gradients, wb, config, table, (passed, detail), serde_json::Value::Object(timing)))
}
