//! LLM request construction and reply validation. The backend is any
//! chat-completion service; its output is untrusted text.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{clamp_unit, DialogueTurn, EditInstruction, EditMode, IpmError, MemoryBank, ParsedTurn, ParserSource};
use crate::taxonomy::Taxonomy;

const BUILTIN: &str = include_str!("../../data/prompt_pack.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub user: String,
    pub response: String,
}

/// Versioned system prompt, output schema and few-shot examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPack {
    pub format: String,
    pub version: u32,
    pub max_history_turns: usize,
    pub max_request_chars: usize,
    pub empty_state_marker: String,
    pub system: String,
    pub output_schema: String,
    pub examples: Vec<PromptExample>,
    /// Sent after an unusable reply; `{error}` is substituted.
    pub retry_addendum: String,
}

impl Default for PromptPack {
    fn default() -> Self {
        PromptPack::from_json(BUILTIN).expect("builtin prompt pack is valid")
    }
}

impl PromptPack {
    pub fn from_json(s: &str) -> Result<Self, IpmError> {
        let p: PromptPack = serde_json::from_str(s).map_err(|e| IpmError::Config(format!("prompt pack: {e}")))?;
        if p.format != "charedit.prompt_pack" {
            return Err(IpmError::Config(format!("prompt pack: unexpected format {}", p.format)));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub pack_version: u32,
    pub messages: Vec<ChatMessage>,
}

impl LlmRequest {
    pub fn total_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

/// A chat-completion service. Implementations must be usable from several
/// sessions at once.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, BackendError>;
}

fn attribute_table(taxonomy: &Taxonomy) -> String {
    taxonomy
        .labels
        .iter()
        .map(|l| {
            let adjs: Vec<&str> = l.adjectives().collect();
            format!("- {}: {} (adjectives: {})", l.key, l.phrase, adjs.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn bank_section(bank: &MemoryBank, pack: &PromptPack) -> String {
    if bank.entries.is_empty() {
        return pack.empty_state_marker.clone();
    }
    bank.entries
        .values()
        .map(|a| {
            format!(
                "- {}: prompt \"{}\", strength {}, last round {}",
                a.attribute_key, a.prompt, a.strength, a.last_round
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn turns_section(turns: &[DialogueTurn]) -> String {
    if turns.is_empty() {
        return "(none)".into();
    }
    turns.iter().map(|t| format!("User: {}\nAssistant: {}", t.user, t.feedback)).collect::<Vec<_>>().join("\n")
}

fn final_message(user_text: &str, turns: &[DialogueTurn], bank: &MemoryBank, pack: &PromptPack) -> String {
    format!(
        "## Memory bank\n{}\n\n## Recent turns\n{}\n\n## User\n{}",
        bank_section(bank, pack),
        turns_section(turns),
        user_text
    )
}

/// Deterministic request: system prompt with the attribute table and output
/// schema, few-shot pairs, then the bank, the last turns and the new text.
/// Old turns are dropped first to stay under the size bound.
pub fn build_llm_request(
    user_text: &str,
    history: &[DialogueTurn],
    bank: &MemoryBank,
    taxonomy: &Taxonomy,
    pack: &PromptPack,
) -> LlmRequest {
    let mut messages = vec![ChatMessage::system(format!(
        "{}\n\n## Attributes\n{}\n\n## Output schema\n{}",
        pack.system,
        attribute_table(taxonomy),
        pack.output_schema
    ))];
    for ex in &pack.examples {
        messages.push(ChatMessage::user(ex.user.clone()));
        messages.push(ChatMessage::assistant(ex.response.clone()));
    }
    let fixed: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    let mut turns = &history[history.len().saturating_sub(pack.max_history_turns)..];
    let size = |turns: &[DialogueTurn], text: &str| fixed + final_message(text, turns, bank, pack).chars().count();
    while !turns.is_empty() && size(turns, user_text) > pack.max_request_chars {
        turns = &turns[1..];
    }
    let mut text = user_text.to_string();
    let over = size(turns, &text).saturating_sub(pack.max_request_chars);
    if over > 0 {
        let keep = text.chars().count().saturating_sub(over);
        text = text.chars().take(keep).collect();
    }
    messages.push(ChatMessage::user(final_message(&text, turns, bank, pack)));
    LlmRequest { pack_version: pack.version, messages }
}

#[derive(Debug, Deserialize)]
struct RawEdit {
    attribute: String,
    prompt: String,
    strength: Option<f64>,
    delta: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawResponse {
    feedback: String,
    edits: Vec<RawEdit>,
    #[serde(default)]
    suggestions: Vec<String>,
    #[serde(default)]
    reset_all: bool,
}

/// First JSON object embedded in `raw`, tolerating prose or code fences
/// around it.
fn first_object(raw: &str) -> Option<Value> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v @ Value::Object(_))) => Some(v),
            _ => None,
        }
    })
}

/// Validates a backend reply. Strengths are clamped with a note; unknown
/// attributes are resolved through the taxonomy aliases or dropped with a
/// note. Malformed replies are errors, which the caller retries.
pub fn parse_llm_response(raw: &str, taxonomy: &Taxonomy) -> Result<ParsedTurn, IpmError> {
    let value = first_object(raw).ok_or_else(|| IpmError::Parse("no JSON object found".into()))?;
    let resp: RawResponse =
        serde_json::from_value(value).map_err(|e| IpmError::Parse(format!("schema violation: {e}")))?;
    let mut notes = Vec::new();
    let mut edits = Vec::with_capacity(resp.edits.len());
    for (i, e) in resp.edits.into_iter().enumerate() {
        let (value, mode, lo) = match (e.strength, e.delta) {
            (Some(s), None) => (s, EditMode::Absolute, 0.0),
            (None, Some(d)) => (d, EditMode::Delta, -1.0),
            _ => return Err(IpmError::Parse(format!("edit {i} needs exactly one of strength or delta"))),
        };
        if e.prompt.trim().is_empty() {
            return Err(IpmError::Parse(format!("edit {i} has an empty prompt")));
        }
        let Some(label) = taxonomy.get(&e.attribute).or_else(|| taxonomy.resolve(&e.attribute)) else {
            notes.push(format!("(Ignored unknown attribute \"{}\".)", e.attribute));
            continue;
        };
        let clamped = match mode {
            EditMode::Absolute => clamp_unit(value),
            EditMode::Delta => value.clamp(lo, 1.0),
        };
        if clamped != value {
            notes.push(format!(
                "({} {value} clamped to {clamped}.)",
                if mode == EditMode::Delta { "delta" } else { "strength" }
            ));
        }
        edits.push(EditInstruction { attribute_key: label.key.clone(), prompt: e.prompt, strength: clamped, mode });
    }
    let mut feedback = resp.feedback;
    for n in notes {
        if !feedback.is_empty() {
            feedback.push(' ');
        }
        feedback.push_str(&n);
    }
    Ok(ParsedTurn {
        feedback,
        edits,
        suggestions: resp.suggestions,
        parser_source: ParserSource::Llm,
        reset_all: resp.reset_all,
    })
}
