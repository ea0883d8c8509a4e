use charedit_core::localizer::{zlpr_loss, HashingFeaturizer};
use charedit_core::schema::{mix, snap_discrete, validate, ChannelMask, ParameterSchema, ParameterVector};
use charedit_core::solver::strength_weight;
use charedit_core::taxonomy::{desk_schema, full_schema};
use proptest::prelude::*;

fn schemas() -> impl Strategy<Value = ParameterSchema> {
    prop_oneof![Just(desk_schema()), Just(full_schema())]
}

fn vector_for(schema: &ParameterSchema) -> impl Strategy<Value = ParameterVector> {
    prop::collection::vec(-3.0f64..3.0, schema.len()).prop_map(ParameterVector::from_vec)
}

fn label_mask_for(schema: &ParameterSchema) -> impl Strategy<Value = ChannelMask> {
    let labels = schema.labels();
    let s = schema.clone();
    prop::collection::vec(any::<bool>(), labels.len()).prop_map(move |pick| {
        let chosen: Vec<&str> = labels.iter().zip(&pick).filter(|(_, p)| **p).map(|(l, _)| l.as_str()).collect();
        s.label_mask(chosen)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snapped_vectors_validate((schema, x) in schemas().prop_flat_map(|s| { let v = vector_for(&s); (Just(s), v) })) {
        let snapped = snap_discrete(&x, &schema);
        prop_assert!(validate(&snapped, &schema).unwrap().is_valid());
        // idempotent
        prop_assert!(snap_discrete(&snapped, &schema).bit_identical(&snapped));
    }

    #[test]
    fn label_masks_are_group_uniform((schema, mask) in schemas().prop_flat_map(|s| { let m = label_mask_for(&s); (Just(s), m) })) {
        prop_assert!(mask.check(&schema).is_ok());
    }

    #[test]
    fn mix_keeps_unmasked_channels(
        (schema, a, b, mask) in schemas().prop_flat_map(|s| {
            let (a, b, m) = (vector_for(&s), vector_for(&s), label_mask_for(&s));
            (Just(s), a, b, m)
        })
    ) {
        let out = mix(&a, &b, &mask, &schema).unwrap();
        for i in 0..schema.len() {
            let want = if mask.bits[i] { b.0[i] } else { a.0[i] };
            prop_assert_eq!(out.0[i].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn strength_weight_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(strength_weight(lo) <= strength_weight(hi));
        let w = strength_weight(a);
        prop_assert!((0.0..=2.0).contains(&w));
        // symmetric about s = 1/2
        prop_assert!((strength_weight(a) + strength_weight(1.0 - a) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zlpr_is_positive_and_gradient_bounded(
        pairs in prop::collection::vec((-1e4f64..1e4, any::<bool>()), 1..25)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let (loss, grad) = zlpr_loss(&scores, &positive);
        prop_assert!(loss.is_finite() && loss >= 0.0);
        // the positive and negative gradients are softmax shares below one
        let pos: f64 = grad.iter().zip(&positive).filter(|(_, p)| **p).map(|(g, _)| -g).sum();
        let neg: f64 = grad.iter().zip(&positive).filter(|(_, p)| !**p).map(|(g, _)| *g).sum();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pos));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&neg));
        for (g, p) in grad.iter().zip(&positive) {
            let signed_ok = if *p { *g <= 0.0 } else { *g >= 0.0 };
            prop_assert!(signed_ok);
        }
    }

    #[test]
    fn zlpr_decreases_when_positives_rise(
        pairs in prop::collection::vec((-20f64..20.0, any::<bool>()), 1..10), bump in 0.01f64..5.0
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let raised: Vec<f64> = scores.iter().zip(&positive).map(|(s, p)| if *p { s + bump } else { s - bump }).collect();
        prop_assert!(zlpr_loss(&raised, &positive).0 <= zlpr_loss(&scores, &positive).0);
    }

    #[test]
    fn features_are_unit_or_empty(text in "[a-z ]{0,40}") {
        let f = HashingFeaturizer::default().features(&text);
        let norm: f64 = f.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        prop_assert!(f.is_empty() || (norm - 1.0).abs() < 1e-12);
    }
}
