mod common;

use std::fs;
use std::sync::Arc;
use std::thread;

use charedit_service::manager::CreateSession;
use charedit_service::store::{read_events, SessionStore, SNAPSHOT_EVERY};
use charedit_service::{ServiceError, SessionManager};
use common::*;

fn manager(dir: &std::path::Path) -> SessionManager {
    SessionManager::new(editor(), Some(SessionStore::open(dir).unwrap()))
}

#[test]
fn logs_resume_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path());
    let id = m
        .create(CreateSession { seed: Some(2), initial_description: Some("a face with big eyes".into()) })
        .unwrap()
        .session_id;
    for _ in 0..3 {
        for line in SCRIPT {
            m.message(&id, line).unwrap();
        }
        m.undo(&id).unwrap();
    }
    let live = m.snapshot(&id).unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    assert_eq!(read_events(&store.log_path(&id).unwrap()).unwrap(), live.events);
    assert!(live.events.len() > SNAPSHOT_EVERY);
    assert!(store.read_snapshot(&id).unwrap().is_some());

    let resumed = manager(dir.path());
    assert_eq!(resumed.resume_all().unwrap(), 1);
    let back = resumed.snapshot(&id).unwrap();
    assert!(back.current.bit_identical(&live.current));
    assert_eq!(back.bank, live.bank);
    assert_eq!(back.version, live.version);
    // the resumed session keeps appending to the same log
    resumed.message(&id, "make the jaw wider").unwrap();
    let n = read_events(&store.log_path(&id).unwrap()).unwrap().len();
    assert_eq!(n, live.events.len() + 1);
}

#[test]
fn tampered_log_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path());
    let id = m.create(CreateSession::default()).unwrap().session_id;
    m.message(&id, "make the nose bigger").unwrap();
    let path = SessionStore::open(dir.path()).unwrap().log_path(&id).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // the user never asked for this strength
    lines[1]["record"]["parsed"]["edits"][0]["strength"] = serde_json::json!(0.9);
    let tampered: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&path, tampered).unwrap();
    let err = manager(dir.path()).resume_all().unwrap_err();
    assert_eq!(err.code(), "replay_mismatch");
}

#[test]
fn corrupt_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path());
    let id = m.create(CreateSession::default()).unwrap().session_id;
    let path = SessionStore::open(dir.path()).unwrap().log_path(&id).unwrap();
    fs::write(&path, format!("{}{{not json\n", fs::read_to_string(&path).unwrap())).unwrap();
    assert!(matches!(manager(dir.path()).resume_all(), Err(ServiceError::Store(_))));
}

#[test]
fn session_ids_cannot_escape_the_directory() {
    let store = SessionStore::open(tempfile::tempdir().unwrap().path()).unwrap();
    assert!(store.log_path("../x").is_err());
    assert!(store.log_path("").is_err());
    assert!(store.log_path("abc-1_2").is_ok());
}

#[test]
fn unknown_session_is_an_error() {
    let m = SessionManager::new(editor(), None);
    let err = m.message("nope", "hi").unwrap_err();
    assert_eq!(err.code(), "session_not_found");
    assert_eq!(m.undo("nope").unwrap_err().code(), "session_not_found");
}

#[test]
fn parallel_sessions_do_not_interfere() {
    let scripts: Vec<Vec<&str>> = vec![
        vec!["make the nose bigger", "a bit more"],
        vec!["very dark eyeshadow", "make the eyes wider"],
        vec!["extremely narrow jaw", "hello", "lighter lipstick"],
        vec!["make the mouth fuller", "reset the mouth"],
    ];
    // sequential reference
    let expected: Vec<_> = scripts
        .iter()
        .map(|sc| {
            let ed = editor();
            let mut s = ed.start_session("x".into(), 9, None).unwrap();
            for line in sc {
                ed.handle_turn(&mut s, line).unwrap();
            }
            s.current
        })
        .collect();
    let m = Arc::new(SessionManager::new(editor(), None));
    let handles: Vec<_> = scripts
        .iter()
        .cloned()
        .map(|sc| {
            let m = Arc::clone(&m);
            thread::spawn(move || {
                let id = m.create(CreateSession { seed: Some(9), initial_description: None }).unwrap().session_id;
                for line in sc {
                    m.message(&id, line).unwrap();
                }
                m.parameters(&id).unwrap().values
            })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&expected) {
        assert!(h.join().unwrap().bit_identical(want));
    }
}

#[test]
fn concurrent_messages_to_one_session_are_serialized() {
    let m = Arc::new(SessionManager::new(editor(), None));
    let id = m.create(CreateSession::default()).unwrap().session_id;
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let (m, id) = (Arc::clone(&m), id.clone());
            thread::spawn(move || {
                let line = if i % 2 == 0 { "a bit more nose" } else { "make the eyes a bit wider" };
                m.message(&id, line).unwrap().outcome.round
            })
        })
        .collect();
    let mut rounds: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    rounds.sort();
    assert_eq!(rounds, (1..=8).collect::<Vec<_>>());
    let s = m.snapshot(&id).unwrap();
    // each round started where the previous one ended
    for w in s.rounds.windows(2) {
        assert!(w[1].x_before.bit_identical(&w[0].x_after));
    }
    let back = m.editor().replay(&s.events).unwrap();
    assert!(back.current.bit_identical(&s.current));
}
