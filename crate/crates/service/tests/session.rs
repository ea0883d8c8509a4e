mod common;

use charedit_core::solver::SolveConfig;
use charedit_service::session::{EditAction, MaskSource, RoundKind};
use charedit_service::SessionError;
use common::*;

#[test]
fn fresh_session_sits_at_the_prior_mean() {
    let ed = editor();
    let s = ed.start_session("a".into(), 7, None).unwrap();
    assert!(s.current.bit_identical(&ed.prior_mean_face().unwrap()));
    assert!(s.rounds.is_empty());
    assert_eq!(s.version, 0);
    assert_eq!(s.solve.seed, 7);
}

#[test]
fn whole_face_description_creates_round_zero() {
    let ed = editor();
    let a = ed.start_session("a".into(), 3, Some("a secret agent")).unwrap();
    let b = ed.start_session("b".into(), 3, Some("a secret agent")).unwrap();
    assert_eq!(a.rounds.len(), 1);
    let r0 = &a.rounds[0];
    assert_eq!((r0.round, r0.kind), (0, RoundKind::Create));
    assert_eq!(r0.edits[0].mask_source, MaskSource::WholeFace);
    assert!(!changed(&a.current, &ed.prior_mean_face().unwrap()).is_empty());
    assert!(a.current.bit_identical(&b.current));
    assert!(a.base.bit_identical(&a.current));
}

#[test]
fn attribute_description_creates_only_those_channels() {
    let ed = editor();
    let s = ed.start_session("a".into(), 0, Some("a face with very big eyes")).unwrap();
    let r0 = &s.rounds[0];
    assert_eq!(r0.edits.len(), 1);
    assert_eq!(r0.edits[0].attribute_key, "eyes");
    assert_eq!(r0.edits[0].action, EditAction::Created);
    let diff = changed(&s.current, &ed.prior_mean_face().unwrap());
    assert!(!diff.is_empty());
    let eyes = channels_of(&ed.engine, &["eyes"]);
    assert!(diff.iter().all(|i| eyes.contains(i)), "{diff:?}");
    assert_eq!(s.bank.get("eyes").unwrap().strength, 0.75);
}

#[test]
fn chat_turn_changes_nothing() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    let before = s.current.clone();
    let out = ed.handle_turn(&mut s, "hello there").unwrap();
    assert!(out.edits.is_empty());
    assert!(s.current.bit_identical(&before));
    assert_eq!(s.version, 0);
    assert_eq!(s.rounds.len(), 1);
    assert_eq!(s.bank.round_counter, 1);
}

#[test]
fn nose_edit_touches_only_nose_channels() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    let before = s.current.clone();
    let out = ed.handle_turn(&mut s, "make the nose bigger").unwrap();
    assert_eq!(out.edits[0].action, EditAction::Edited);
    assert_eq!(out.edits[0].labels, vec!["nose".to_string()]);
    let diff = changed(&before, &s.current);
    assert!(!diff.is_empty());
    let nose = channels_of(&ed.engine, &["nose"]);
    assert!(diff.iter().all(|i| nose.contains(i)));
    assert_eq!(out.parameters_version, 1);
    assert_eq!(s.rounds[0].x_after, s.current);
}

#[test]
fn multi_edit_turn_stays_inside_union_of_masks() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    let before = s.current.clone();
    let out = ed.handle_turn(&mut s, "make the eyes wider and the mouth fuller").unwrap();
    assert_eq!(out.edits.len(), 2);
    let allowed = channels_of(&ed.engine, &["eyes", "mouth"]);
    let diff = changed(&before, &s.current);
    assert!(!diff.is_empty());
    assert!(diff.iter().all(|i| allowed.contains(i)));
}

#[test]
fn scripted_dialogue_strengths_and_determinism() {
    let run = || {
        let ed = editor();
        let mut s = ed.start_session("g".into(), 0, None).unwrap();
        let mut traj = Vec::new();
        for line in SCRIPT {
            let out = ed.handle_turn(&mut s, line).unwrap();
            traj.push((
                out.edits.iter().map(|e| (e.attribute_key.clone(), e.strength)).collect::<Vec<_>>(),
                s.current.clone(),
            ));
        }
        traj
    };
    let a = run();
    assert_eq!(a[0].0, vec![("nose".to_string(), 0.25)]);
    assert_eq!(a[1].0, vec![("nose".to_string(), 0.40)]);
    assert_eq!(a[2].0, vec![("eyeshadow".to_string(), 0.75)]);
    assert!(a[3].0.is_empty());
    assert!(a[3].1.bit_identical(&a[2].1));
    assert_eq!(a[4].0, vec![("eyes".to_string(), 0.5)]);
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.1.bit_identical(&y.1));
    }
}

#[test]
fn undo_restores_previous_state_exactly() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    assert!(matches!(ed.undo(&mut s), Err(SessionError::NothingToUndo)));
    ed.handle_turn(&mut s, "make the eyes wider").unwrap();
    let (x1, bank1) = (s.current.clone(), s.bank.clone());
    let first = ed.handle_turn(&mut s, "make the nose bigger").unwrap();
    let x2 = s.current.clone();
    assert_eq!(ed.undo(&mut s).unwrap(), 2);
    assert!(s.current.bit_identical(&x1));
    assert_eq!(s.bank, bank1);
    assert!(s.rounds[1].undone);
    // the same text again lands on the same parameters
    let again = ed.handle_turn(&mut s, "make the nose bigger").unwrap();
    assert!(s.current.bit_identical(&x2));
    assert_eq!(again.edits, first.edits);
    assert_eq!(again.round, 3);
    // undo walks back past undone rounds
    ed.undo(&mut s).unwrap();
    ed.undo(&mut s).unwrap();
    assert!(s.current.bit_identical(&ed.prior_mean_face().unwrap()));
    assert!(matches!(ed.undo(&mut s), Err(SessionError::NothingToUndo)));
}

#[test]
fn creation_round_is_not_undoable() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, Some("a secret agent")).unwrap();
    assert!(matches!(ed.undo(&mut s), Err(SessionError::NothingToUndo)));
}

#[test]
fn solver_failure_rolls_back_the_turn() {
    let mut ed = editor();
    ed.solve = SolveConfig { lambda_prior: 1e6, ..SolveConfig::default() };
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    let (x0, bank0) = (s.current.clone(), s.bank.clone());
    let out = ed.handle_turn(&mut s, "make the eyes wider and the nose bigger").unwrap();
    let err = out.error.expect("diverges");
    assert_eq!(err.code, "solver_diverged");
    assert!(out.feedback.contains("Nothing was changed"));
    assert!(out.edits.is_empty());
    assert!(s.current.bit_identical(&x0));
    assert_eq!(s.bank, bank0);
    assert!(s.rounds[0].failed());
    assert!(matches!(ed.undo(&mut s), Err(SessionError::NothingToUndo)));
    // failed rounds replay as failed rounds
    let back = ed.replay(&s.events).unwrap();
    assert!(back.rounds[0].failed());
}

#[test]
fn resets_return_to_the_base_face() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    let base = s.current.clone();
    ed.handle_turn(&mut s, "make the nose bigger").unwrap();
    ed.handle_turn(&mut s, "make the eyes wider").unwrap();
    let after_eyes = s.current.clone();
    let out = ed.handle_turn(&mut s, "reset the nose").unwrap();
    assert_eq!(out.edits[0].action, EditAction::Restored);
    let nose = channels_of(&ed.engine, &["nose"]);
    for i in 0..base.len() {
        let want = if nose.contains(&i) { base.0[i] } else { after_eyes.0[i] };
        assert_eq!(s.current.0[i].to_bits(), want.to_bits());
    }
    ed.handle_turn(&mut s, "reset everything").unwrap();
    assert!(s.current.bit_identical(&base));
    assert!(s.bank.entries.values().all(|a| a.strength == 0.0));
}

#[test]
fn empty_message_is_rejected() {
    let ed = editor();
    let mut s = ed.start_session("a".into(), 0, None).unwrap();
    assert!(matches!(ed.handle_turn(&mut s, "   "), Err(SessionError::EmptyMessage)));
    assert!(s.rounds.is_empty());
}

#[test]
fn replay_rebuilds_the_session() {
    let ed = editor();
    let mut s = ed.start_session("r".into(), 5, Some("a face with a small mouth")).unwrap();
    for line in ["make the nose bigger", "a bit more", "lighter lipstick", "hello"] {
        ed.handle_turn(&mut s, line).unwrap();
    }
    ed.undo(&mut s).unwrap();
    ed.handle_turn(&mut s, "extremely narrow jaw").unwrap();
    let back = ed.replay(&s.events).unwrap();
    assert!(back.current.bit_identical(&s.current));
    assert_eq!(back.bank, s.bank);
    assert_eq!(back.rounds, s.rounds);
    assert_eq!(back.version, s.version);
    assert_eq!(back.events, s.events);
}

#[test]
fn replay_detects_tampering() {
    let ed = editor();
    let mut s = ed.start_session("r".into(), 0, None).unwrap();
    ed.handle_turn(&mut s, "make the nose bigger").unwrap();
    let mut events = s.events.clone();
    if let charedit_service::SessionEvent::Round { record } = &mut events[1] {
        record.x_after.0[0] += 1e-12;
    }
    assert!(matches!(ed.replay(&events), Err(SessionError::Replay { event: 1, .. })));
    assert!(matches!(ed.replay(&events[1..]), Err(SessionError::Replay { event: 0, .. })));
}
