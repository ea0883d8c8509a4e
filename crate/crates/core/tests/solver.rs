use std::sync::OnceLock;

use charedit_core::engine::{Engine, Scale};
use charedit_core::latent::prior_loss;
use charedit_core::schema::{validate, ChannelMask, ParameterVector};
use charedit_core::semantic::clip_loss;
use charedit_core::solver::{create, edit, objective_eval, strength_weight, SolveConfig, SolveError};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> &'static Engine {
    static E: OnceLock<Engine> = OnceLock::new();
    E.get_or_init(|| Engine::synthetic(Scale::Desk, 1).expect("desk engine"))
}

fn full() -> &'static Engine {
    static E: OnceLock<Engine> = OnceLock::new();
    E.get_or_init(|| Engine::synthetic(Scale::Full, 1).expect("full engine"))
}

fn mean_face(e: &Engine) -> ParameterVector {
    charedit_core::schema::snap_discrete(&e.latent.decode(&e.prior.mu_z).unwrap(), &e.schema)
}

fn masked_norm(a: &ParameterVector, b: &ParameterVector, mask: &ChannelMask) -> f64 {
    mask.indices().iter().map(|&i| (a.0[i] - b.0[i]).powi(2)).sum::<f64>().sqrt()
}

fn unmasked_identical(a: &ParameterVector, b: &ParameterVector, mask: &ChannelMask) -> bool {
    mask.bits.iter().enumerate().all(|(i, on)| *on || a.0[i].to_bits() == b.0[i].to_bits())
}

#[test]
fn create_reaches_every_lexicon_phrase() {
    let cfg = SolveConfig::default();
    let cases = [desk(), full()].into_iter().flat_map(|e| e.lexicon.entries.iter().map(move |x| (e, x)));
    for (e, entry) in cases {
        let r = create(&entry.phrase, &cfg, &e.models()).unwrap();
        let first = r.loss_trace[0];
        let last = *r.loss_trace.last().unwrap();
        assert_eq!(r.loss_trace.len(), cfg.steps + 1);
        assert!(last.clip < 0.1 * first.clip, "{}: clip {} -> {}", entry.phrase, first.clip, last.clip);
        assert!(last.total <= first.total, "{}: total rose", entry.phrase);
        assert!(validate(&r.x_final, &e.schema).unwrap().is_valid());
    }
}

#[test]
fn overwhelming_prior_pins_the_mean() {
    let e = desk();
    let lambda = 1e6;
    // gradient descent is only stable for lr below 2 / curvature, and the
    // prior's curvature grows with λ; keep lr·λ at the default product
    let scale = SolveConfig::default().lambda_prior / lambda;
    let cfg = SolveConfig {
        lambda_prior: lambda,
        lr_continuous: 1.0 * scale,
        lr_discrete: 100.0 * scale,
        ..Default::default()
    };
    let r = create("bigger nose", &cfg, &e.models()).unwrap();
    let z = DVector::from_vec(r.z_final);
    assert!((z - &e.prior.mu_z).norm() < 1e-3);
}

#[test]
fn overwhelming_prior_at_default_rates_diverges() {
    let e = desk();
    let cfg = SolveConfig { lambda_prior: 1e6, ..Default::default() };
    match create("bigger nose", &cfg, &e.models()) {
        Err(SolveError::Diverged { step, trace }) => {
            assert!(step >= 1 && step <= cfg.steps);
            assert!(!trace.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn one_step_has_two_trace_points() {
    let e = desk();
    let cfg = SolveConfig { steps: 1, ..Default::default() };
    let r = create("wider eyes", &cfg, &e.models()).unwrap();
    assert_eq!(r.loss_trace.len(), 2);
    let zero = SolveConfig { steps: 0, ..Default::default() };
    assert!(matches!(create("wider eyes", &zero, &e.models()), Err(SolveError::Config(_))));
}

#[test]
fn empty_prompt_rejected() {
    let e = desk();
    assert_eq!(create("  ", &SolveConfig::default(), &e.models()).unwrap_err(), SolveError::EmptyPrompt);
}

#[test]
fn zero_mask_is_identity() {
    let e = desk();
    let x = mean_face(e);
    let mask = ChannelMask::zeros(e.schema.len());
    let r = edit(&x, "bigger nose", 0.8, &mask, &SolveConfig::default(), &e.models()).unwrap();
    assert!(r.x_final.bit_identical(&x));
}

#[test]
fn zero_strength_is_a_noop() {
    let e = desk();
    let x = create("darker eyeshadow", &SolveConfig::default(), &e.models()).unwrap().x_final;
    let mask = ChannelMask::ones(e.schema.len());
    let r = edit(&x, "bigger nose", 0.0, &mask, &SolveConfig::default(), &e.models()).unwrap();
    assert!(r.x_final.bit_identical(&x));
    assert_eq!(r.loss_trace.len(), 1);
    assert_eq!(r.strength_weight, 0.0);
}

#[test]
fn nose_edit_touches_only_nose_channels() {
    let e = desk();
    let x = mean_face(e);
    let mask = e.schema.label_mask(["nose"]);
    let r = edit(&x, "bigger nose", 0.5, &mask, &SolveConfig::default(), &e.models()).unwrap();
    assert!(unmasked_identical(&r.x_final, &x, &mask));
    assert!(masked_norm(&r.x_final, &x, &mask) > 0.0);
    assert!(validate(&r.x_final, &e.schema).unwrap().is_valid());
}

#[test]
fn split_group_mask_rejected() {
    let e = desk();
    let g = &e.schema.discrete_groups[0];
    let mask = ChannelMask::from_indices(e.schema.len(), [g.start]);
    let err = edit(&mean_face(e), "darker lipstick", 0.5, &mask, &SolveConfig::default(), &e.models()).unwrap_err();
    assert!(matches!(err, SolveError::Schema(_)));
}

#[test]
fn stronger_edit_goes_further() {
    let e = desk();
    let x = mean_face(e);
    let mask = e.schema.label_mask(["nose"]);
    let cfg = SolveConfig::default();
    let lo = edit(&x, "bigger nose", 0.3, &mask, &cfg, &e.models()).unwrap();
    let hi = edit(&x, "bigger nose", 0.9, &mask, &cfg, &e.models()).unwrap();
    let clip = |r: &charedit_core::solver::SolveResult| r.loss_trace.last().unwrap().clip;
    assert!(clip(&hi) <= clip(&lo));
    assert!(masked_norm(&hi.x_final, &x, &mask) >= masked_norm(&lo.x_final, &x, &mask));
}

#[test]
fn displacement_monotone_in_strength() {
    let e = desk();
    let x = mean_face(e);
    let cfg = SolveConfig::default();
    for (label, prompt) in [("nose", "bigger nose"), ("eyes", "wider eyes"), ("jaw", "narrower jaw")] {
        let mask = e.schema.label_mask([label]);
        let norms: Vec<f64> = [0.1, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&s| {
                let r = edit(&x, prompt, s, &mask, &cfg, &e.models()).unwrap();
                masked_norm(&r.x_final, &x, &mask)
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] >= w[0]), "{prompt}: {norms:?}");
    }
}

#[test]
fn prior_lowers_final_prior_loss() {
    let e = desk();
    let with = SolveConfig::default();
    let without = SolveConfig { lambda_prior: 0.0, ..Default::default() };
    for entry in e.lexicon.entries.iter().take(10) {
        let a = create(&entry.phrase, &with, &e.models()).unwrap();
        let b = create(&entry.phrase, &without, &e.models()).unwrap();
        let pa = a.loss_trace.last().unwrap().prior;
        let pb = b.loss_trace.last().unwrap().prior;
        assert!(pa < pb, "{}: {pa} vs {pb}", entry.phrase);
    }
}

#[test]
fn solves_are_deterministic() {
    let e = desk();
    let x = mean_face(e);
    let mask = e.schema.label_mask(["eyes", "eyeshadow"]);
    let a = edit(&x, "darker eyeshadow", 0.6, &mask, &SolveConfig::default(), &e.models()).unwrap();
    let b = edit(&x, "darker eyeshadow", 0.6, &mask, &SolveConfig::default(), &e.models()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn random_edits_preserve_unmasked_channels() {
    let e = desk();
    let labels = e.schema.labels();
    let phrases: Vec<&str> = e.lexicon.entries.iter().map(|l| l.phrase.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = SolveConfig { steps: 10, ..Default::default() };
    let mut x = mean_face(e);
    for _ in 0..60 {
        let chosen: Vec<&str> = labels.iter().filter(|_| rng.random_bool(0.3)).map(String::as_str).collect();
        let mask = e.schema.label_mask(chosen);
        let prompt = phrases[rng.random_range(0..phrases.len())];
        let r = edit(&x, prompt, rng.random(), &mask, &cfg, &e.models()).unwrap();
        assert!(unmasked_identical(&r.x_final, &x, &mask));
        assert!(validate(&r.x_final, &e.schema).unwrap().is_valid());
        x = r.x_final;
    }
}

#[test]
fn objective_components_recombine() {
    let e = desk();
    let m = e.models();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = e.embedder.embed_text("bigger nose").unwrap();
    let x_prev = mean_face(e);
    for _ in 0..20 {
        let z = &e.prior.mu_z + DVector::<f64>::from_fn(e.latent.dim(), |_, _| rng.random_range(-0.5..0.5));
        let labels: Vec<String> = e.schema.labels().into_iter().filter(|_| rng.random_bool(0.5)).collect();
        let mask = e.schema.label_mask(labels.iter().map(String::as_str));
        let ls: f64 = rng.random_range(0.0..2.0);
        let lam: f64 = rng.random_range(0.0..1e-2);
        let o = objective_eval(&z, &x_prev, &mask, &target, ls, lam, &m).unwrap();

        let x_mix = charedit_core::schema::mix(&x_prev, &e.latent.decode(&z).unwrap(), &mask, &e.schema).unwrap();
        let clip = clip_loss("bigger nose", &x_mix, e.renderer.as_ref(), e.embedder.as_ref()).unwrap().value;
        let (prior, _) = prior_loss(&z, &e.prior);
        assert!((o.clip - clip).abs() < 1e-12);
        assert!((o.prior - prior).abs() < 1e-12 * prior.max(1.0));
        assert!((o.total - (ls * clip + lam * prior)).abs() < 1e-12);

        let only_prior = objective_eval(&z, &x_prev, &mask, &target, 0.0, lam, &m).unwrap();
        assert_eq!(only_prior.total, lam * only_prior.prior);
        let full = ChannelMask::ones(e.schema.len());
        let only_clip = objective_eval(&z, &x_prev, &full, &target, ls, 0.0, &m).unwrap();
        assert_eq!(only_clip.total, ls * only_clip.clip);
    }
}

#[test]
fn strength_weight_is_increasing_and_bounded() {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let w: Vec<f64> = grid.iter().map(|&s| strength_weight(s)).collect();
    assert!(w.windows(2).all(|p| p[1] > p[0]));
    assert!(w.iter().all(|v| (0.0..=2.0).contains(v)));
}
