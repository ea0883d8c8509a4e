use charedit_core::localizer::corpus::{generate, shuffle_labels, split_holdout, CorpusConfig};
use charedit_core::localizer::{
    evaluate, localize, train, zlpr_loss, CorpusExample, HashingFeaturizer, LabelSet, LocalizationSource, TrainConfig,
};
use charedit_core::taxonomy::{builtin_taxonomy, desk_schema, full_schema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ln(1 + Σ e^{v})` summed as base-2 (mantissa, exponent) pairs so that
/// terms up to e^{±1e4} neither overflow nor vanish.
fn ln1p_sum_exp_extended(values: &[f64]) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    // e^v = 2^(v / ln 2) = m · 2^k with k integral
    let mut terms: Vec<(f64, i64)> = vec![(1.0, 0)];
    for &v in values {
        let t = v / ln2;
        let k = t.floor();
        terms.push(((t - k).exp2(), k as i64));
    }
    let top = terms.iter().map(|t| t.1).max().unwrap();
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

fn zlpr_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| !**p).map(|(s, _)| *s).collect();
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| **p).map(|(s, _)| -*s).collect();
    ln1p_sum_exp_extended(&neg) + ln1p_sum_exp_extended(&pos)
}

fn zlpr_naive(scores: &[f64], positive: &[bool]) -> f64 {
    let mut neg = 1.0;
    let mut pos = 1.0;
    for (s, p) in scores.iter().zip(positive) {
        if *p {
            pos += (-s).exp();
        } else {
            neg += s.exp();
        }
    }
    neg.ln() + pos.ln()
}

#[test]
fn zlpr_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.random_range(1..=19);
        let magnitude = [1.0, 10.0, 100.0, 1e3, 1e4][case % 5];
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-magnitude..=magnitude)).collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let (loss, grad) = zlpr_loss(&scores, &positive);
        let oracle = zlpr_oracle(&scores, &positive);
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
        assert!((loss - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "case {case}: {loss} vs {oracle}");
        if magnitude <= 100.0 {
            let naive = zlpr_naive(&scores, &positive);
            assert!((loss - naive).abs() <= 1e-10 * naive.abs().max(1.0));
        }
    }
}

#[test]
fn zlpr_at_extremes() {
    // confident and correct: nothing to pay
    let (l, _) = zlpr_loss(&[1e4, -1e4], &[true, false]);
    assert_eq!(l, 0.0);
    // confident and wrong: linear in the score
    let (l, g) = zlpr_loss(&[-1e4, 1e4], &[true, false]);
    assert!((l - 2e4).abs() < 1e-6);
    assert_eq!(g, vec![-1.0, 1.0]);
}

fn toy_corpus() -> (Vec<CorpusExample>, LabelSet) {
    let labels = LabelSet::new(vec!["hair".into(), "nose".into(), "skin".into()]).unwrap();
    let texts = [
        ("longer hair", vec!["hair"]),
        ("shorter hair please", vec!["hair"]),
        ("bigger nose", vec!["nose"]),
        ("smaller nose", vec!["nose"]),
        ("paler skin", vec!["skin"]),
        ("darker skin", vec!["skin"]),
        ("bigger nose and darker skin", vec!["nose", "skin"]),
        ("hi there", vec![]),
    ];
    let corpus = texts
        .iter()
        .map(|(t, l)| CorpusExample { text: t.to_string(), labels: l.iter().map(|s| s.to_string()).collect() })
        .collect();
    (corpus, labels)
}

#[test]
fn separable_toy_corpus_is_learned_exactly() {
    let (corpus, labels) = toy_corpus();
    let cfg = TrainConfig { epochs: 200, batch_size: 4, ..Default::default() };
    let (model, report) = train(&corpus, &labels, HashingFeaturizer::default(), &cfg).unwrap();
    assert!(report.epoch_losses.windows(2).all(|w| w[1] <= w[0]));
    let m = evaluate(&model, &corpus);
    assert_eq!(m.micro_f1, 1.0);
    assert_eq!(m.false_positives, 0);
}

#[test]
fn training_is_deterministic() {
    let (corpus, labels) = toy_corpus();
    let cfg = TrainConfig { epochs: 5, batch_size: 3, seed: 4, ..Default::default() };
    let a = train(&corpus, &labels, HashingFeaturizer::default(), &cfg).unwrap().0;
    let b = train(&corpus, &labels, HashingFeaturizer::default(), &cfg).unwrap().0;
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn runaway_learning_rate_is_reported() {
    let (corpus, labels) = toy_corpus();
    let cfg = TrainConfig { epochs: 5, lr: 1e6, batch_size: 1, seed: 0 };
    let err = train(&corpus, &labels, HashingFeaturizer::default(), &cfg).unwrap_err();
    assert!(matches!(err, charedit_core::localizer::LocalizerError::Diverged { .. }), "{err:?}");
}

#[test]
fn desk_localizer_generalizes_and_control_does_not() {
    let schema = desk_schema();
    let taxonomy = builtin_taxonomy().restricted_to(&schema);
    let labels = LabelSet::from_schema(&schema);
    let corpus = generate(&taxonomy, &CorpusConfig::default());
    assert_eq!(corpus.len(), 10_000);
    let (train_set, holdout) = split_holdout(&corpus, 0.2, 0);
    assert_eq!(holdout.len(), 2000);

    let (model, _) = train(&train_set, &labels, HashingFeaturizer::default(), &TrainConfig::default()).unwrap();
    let m = evaluate(&model, &holdout);
    assert!(m.micro_f1 >= 0.95, "{m:?}");

    let shuffled = shuffle_labels(&train_set, 1);
    let (control, _) = train(&shuffled, &labels, HashingFeaturizer::default(), &TrainConfig::default()).unwrap();
    let c = evaluate(&control, &holdout);
    assert!(c.micro_f1 < 0.5, "shuffled labels should not generalize: {c:?}");

    for ex in &holdout {
        let loc = localize(&ex.text, Some(&model), &schema, None);
        loc.mask.check(&schema).expect("group-uniform mask");
    }
}

#[test]
fn full_label_set_has_nineteen_labels() {
    let schema = full_schema();
    assert_eq!(LabelSet::from_schema(&schema).len(), 19);
}

#[test]
fn localize_fallbacks() {
    let schema = desk_schema();
    let loc = localize("", None, &schema, None);
    assert_eq!(loc.source, LocalizationSource::Unlocalized);
    assert_eq!(loc.mask.count(), schema.len());
    let loc = localize("make it pop", None, &schema, None);
    assert!(loc.unlocalized());
}
