#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use charedit_core::engine::{Engine, Scale};
use charedit_core::schema::ParameterVector;
use charedit_service::Editor;

pub fn desk() -> Arc<Engine> {
    static ENGINE: OnceLock<Arc<Engine>> = OnceLock::new();
    ENGINE.get_or_init(|| Arc::new(Engine::synthetic(Scale::Desk, 1).unwrap())).clone()
}

pub fn editor() -> Editor {
    Editor::new(desk())
}

/// Indices where two vectors differ bitwise.
pub fn changed(a: &ParameterVector, b: &ParameterVector) -> Vec<usize> {
    (0..a.len()).filter(|&i| a.0[i].to_bits() != b.0[i].to_bits()).collect()
}

pub fn channels_of(engine: &Engine, labels: &[&str]) -> Vec<usize> {
    engine.schema.label_mask(labels.iter().copied()).indices()
}

pub const SCRIPT: [&str; 5] = [
    "make the nose slightly bigger",
    "a bit more",
    "give her very dark eyeshadow",
    "hello there",
    "make the eyes wider",
];
