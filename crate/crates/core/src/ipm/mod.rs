//! Instruction parsing: dialogue turns to (attribute, prompt, strength) edits,
//! plus the per-session attribute memory bank.
//!
//! An LLM backend is optional. Its replies are treated as untrusted and
//! validated; a deterministic rule grammar takes over whenever the backend is
//! missing, unreachable or keeps producing unusable output.

pub mod grammar;
pub mod llm;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::ParameterSchema;
use crate::taxonomy::{builtin_taxonomy, Taxonomy};

pub use grammar::{fallback_parse, GrammarConfig};
pub use llm::{build_llm_request, parse_llm_response, BackendError, ChatMessage, LlmBackend, LlmRequest, PromptPack};

/// Retries after the first unusable backend reply.
pub const MAX_RETRIES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IpmError {
    #[error("unusable parser output: {0}")]
    Parse(String),
    #[error("no LLM backend and the fallback parser is disabled")]
    NoParser,
    #[error("invalid parser data: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u64,
    pub prompt: String,
    pub strength: f64,
}

/// Current editing status of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeState {
    pub attribute_key: String,
    pub prompt: String,
    pub strength: f64,
    pub last_round: u64,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub entries: BTreeMap<String, AttributeState>,
    pub round_counter: u64,
    /// Target of anaphoric refinements ("a bit more").
    #[serde(default)]
    pub last_edited: Option<String>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&AttributeState> {
        self.entries.get(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bank serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, IpmError> {
        serde_json::from_str(s).map_err(|e| IpmError::Config(format!("memory bank: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Absolute,
    Delta,
}

/// `strength` is an absolute level in `[0, 1]`, or a signed adjustment in
/// `[-1, 1]` in delta mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditInstruction {
    pub attribute_key: String,
    pub prompt: String,
    pub strength: f64,
    pub mode: EditMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParserSource {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub feedback: String,
    pub edits: Vec<EditInstruction>,
    pub suggestions: Vec<String>,
    pub parser_source: ParserSource,
    /// Clears every attribute back to strength 0. Not part of the basic
    /// edit vocabulary; triggered by "reset everything" and the like.
    #[serde(default)]
    pub reset_all: bool,
}

/// An edit with its final absolute strength, ready for the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEdit {
    pub attribute_key: String,
    pub prompt: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedTurn {
    pub bank: MemoryBank,
    pub edits: Vec<ResolvedEdit>,
    pub reset_all: bool,
}

/// One previous exchange, oldest first in a history slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub user: String,
    pub feedback: String,
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Folds a parsed turn into a copy of the bank. Absolute edits overwrite,
/// deltas add to the stored strength; everything ends up in `[0, 1]`.
pub fn apply_turn(parsed: &ParsedTurn, bank: &MemoryBank) -> AppliedTurn {
    let mut bank = bank.clone();
    bank.round_counter += 1;
    let round = bank.round_counter;
    let record = |bank: &mut MemoryBank, key: &str, prompt: String, strength: f64| {
        let entry = bank.entries.entry(key.to_string()).or_insert_with(|| AttributeState {
            attribute_key: key.to_string(),
            prompt: prompt.clone(),
            strength: 0.0,
            last_round: round,
            history: Vec::new(),
        });
        entry.prompt = prompt.clone();
        entry.strength = strength;
        entry.last_round = round;
        entry.history.push(HistoryEntry { round, prompt, strength });
    };

    if parsed.reset_all {
        let keys: Vec<String> = bank.entries.keys().cloned().collect();
        for key in keys {
            let prompt = bank.entries[&key].prompt.clone();
            record(&mut bank, &key, prompt, 0.0);
        }
    }
    let mut edits = Vec::with_capacity(parsed.edits.len());
    for e in &parsed.edits {
        let strength = match e.mode {
            EditMode::Absolute => clamp_unit(e.strength),
            EditMode::Delta => {
                let stored = bank.get(&e.attribute_key).map_or(0.0, |a| a.strength);
                clamp_unit(stored + e.strength.clamp(-1.0, 1.0))
            }
        };
        record(&mut bank, &e.attribute_key, e.prompt.clone(), strength);
        bank.last_edited = Some(e.attribute_key.clone());
        edits.push(ResolvedEdit { attribute_key: e.attribute_key.clone(), prompt: e.prompt.clone(), strength });
    }
    AppliedTurn { bank, edits, reset_all: parsed.reset_all }
}

/// Parser configuration shared by all sessions of one schema.
#[derive(Debug, Clone)]
pub struct Ipm {
    pub taxonomy: Taxonomy,
    pub grammar: GrammarConfig,
    pub pack: PromptPack,
    pub fallback_enabled: bool,
}

impl Ipm {
    pub fn new(taxonomy: Taxonomy) -> Self {
        Ipm { taxonomy, grammar: GrammarConfig::default(), pack: PromptPack::default(), fallback_enabled: true }
    }

    /// Builtin vocabulary restricted to the labels of `schema`.
    pub fn for_schema(schema: &ParameterSchema) -> Self {
        Ipm::new(builtin_taxonomy().restricted_to(schema))
    }

    pub fn fallback(&self, user_text: &str, bank: &MemoryBank) -> ParsedTurn {
        fallback_parse(user_text, bank, &self.taxonomy, &self.grammar)
    }

    /// Asks the backend first, retrying up to [`MAX_RETRIES`] times with an
    /// explanation of what was wrong, then falls back to the grammar.
    pub fn parse_turn(
        &self,
        user_text: &str,
        history: &[DialogueTurn],
        bank: &MemoryBank,
        backend: Option<&dyn LlmBackend>,
    ) -> Result<ParsedTurn, IpmError> {
        let Some(backend) = backend else {
            return self.fallback_or_error(user_text, bank, "no backend configured");
        };
        let mut request = build_llm_request(user_text, history, bank, &self.taxonomy, &self.pack);
        for attempt in 0..=MAX_RETRIES {
            let raw = match backend.complete(&request) {
                Ok(raw) => raw,
                Err(e) => return self.fallback_or_error(user_text, bank, &e.to_string()),
            };
            match parse_llm_response(&raw, &self.taxonomy) {
                Ok(parsed) => return Ok(parsed),
                Err(e) => {
                    log::warn!("backend reply {attempt} unusable: {e}");
                    request.messages.push(ChatMessage::assistant(raw));
                    request
                        .messages
                        .push(ChatMessage::user(self.pack.retry_addendum.replace("{error}", &e.to_string())));
                }
            }
        }
        self.fallback_or_error(user_text, bank, "retries exhausted")
    }

    fn fallback_or_error(&self, user_text: &str, bank: &MemoryBank, why: &str) -> Result<ParsedTurn, IpmError> {
        if !self.fallback_enabled {
            return Err(IpmError::NoParser);
        }
        log::debug!("fallback parser used: {why}");
        Ok(self.fallback(user_text, bank))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edit(key: &str, s: f64, mode: EditMode) -> EditInstruction {
        EditInstruction { attribute_key: key.into(), prompt: format!("bigger {key}"), strength: s, mode }
    }

    fn turn(edits: Vec<EditInstruction>) -> ParsedTurn {
        ParsedTurn {
            feedback: String::new(),
            edits,
            suggestions: vec![],
            parser_source: ParserSource::Fallback,
            reset_all: false,
        }
    }

    #[test]
    fn absolute_overwrites() {
        let bank = apply_turn(&turn(vec![edit("nose", 0.3, EditMode::Absolute)]), &MemoryBank::new()).bank;
        let out = apply_turn(&turn(vec![edit("nose", 0.6, EditMode::Absolute)]), &bank);
        assert_eq!(out.bank.get("nose").unwrap().strength, 0.6);
        assert_eq!(out.edits[0].strength, 0.6);
    }

    #[test]
    fn delta_clamps() {
        let bank = apply_turn(&turn(vec![edit("nose", 0.95, EditMode::Absolute)]), &MemoryBank::new()).bank;
        let out = apply_turn(&turn(vec![edit("nose", 0.15, EditMode::Delta)]), &bank);
        assert_eq!(out.bank.get("nose").unwrap().strength, 1.0);
    }

    #[test]
    fn one_round_per_turn() {
        let out = apply_turn(
            &turn(vec![edit("nose", 0.5, EditMode::Absolute), edit("eyes", 0.2, EditMode::Absolute)]),
            &MemoryBank::new(),
        );
        assert_eq!(out.bank.round_counter, 1);
        assert_eq!(out.bank.get("nose").unwrap().history[0].round, 1);
        assert_eq!(out.bank.get("eyes").unwrap().history[0].round, 1);
        assert_eq!(out.bank.last_edited.as_deref(), Some("eyes"));
        let chat = apply_turn(&turn(vec![]), &out.bank);
        assert_eq!(chat.bank.round_counter, 2);
        assert_eq!(chat.bank.entries, out.bank.entries);
    }

    #[test]
    fn reset_all_zeroes_and_keeps_history() {
        let bank = apply_turn(&turn(vec![edit("nose", 0.5, EditMode::Absolute)]), &MemoryBank::new()).bank;
        let mut t = turn(vec![]);
        t.reset_all = true;
        let out = apply_turn(&t, &bank);
        let nose = out.bank.get("nose").unwrap();
        assert_eq!(nose.strength, 0.0);
        assert_eq!(nose.history.len(), 2);
        assert!(out.reset_all);
    }

    #[test]
    fn bank_json_roundtrip() {
        let bank = apply_turn(&turn(vec![edit("nose", 0.1 + 0.2, EditMode::Absolute)]), &MemoryBank::new()).bank;
        assert_eq!(MemoryBank::from_json(&bank.to_json()).unwrap(), bank);
    }
}
