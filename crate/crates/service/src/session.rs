//! One editing dialogue: the round loop, undo, and event-log replay.
//!
//! Each round takes the previous parameters and a user message, parses it
//! into attribute edits, folds them into the memory bank and runs the solver
//! once per edit. A round that fails leaves parameters and bank untouched.
//!
//! Parsing is the only step that may be nondeterministic (an LLM backend), so
//! the parsed turn is recorded with the round and replay re-executes from it.

use std::sync::Arc;
use std::time::Instant;

use charedit_core::engine::Engine;
use charedit_core::ipm::{apply_turn, DialogueTurn, Ipm, IpmError, LlmBackend, MemoryBank, ParsedTurn, ResolvedEdit};
use charedit_core::localizer::{localize, LocalizationSource};
use charedit_core::schema::{mix, snap_discrete, ChannelMask, ParameterVector};
use charedit_core::solver::{create, edit, LossPoint, SolveConfig, SolveError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("message is empty")]
    EmptyMessage,
    #[error("nothing to undo")]
    NothingToUndo,
    #[error(transparent)]
    Parser(#[from] IpmError),
    #[error("initial creation failed: {0}")]
    Create(SolveError),
    #[error("model error: {0}")]
    Model(String),
    #[error("replay diverged at event {event}: {message}")]
    Replay { event: usize, message: String },
}

/// Where an edit's channel mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Localizer labels, plus the parsed attribute's own channels.
    Model,
    Lexicon,
    /// The localizer found nothing; the parsed attribute's channels are used.
    Attribute,
    /// No attribute at all: a whole-face creation.
    WholeFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    Created,
    Edited,
    /// Strength 0: the attribute's channels go back to the session's base face.
    Restored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub attribute_key: String,
    pub prompt: String,
    pub strength: f64,
    pub labels: Vec<String>,
    pub mask_source: MaskSource,
    pub channels: Vec<usize>,
    pub action: EditAction,
    pub loss_initial: Option<LossPoint>,
    pub loss_final: Option<LossPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    /// Round 0, built from the initial description.
    Create,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub kind: RoundKind,
    pub user_text: String,
    pub parsed: ParsedTurn,
    pub feedback: String,
    pub edits: Vec<EditRecord>,
    /// Set when the solver failed; the round then changed nothing.
    pub error: Option<TurnError>,
    pub undone: bool,
    pub bank_before: MemoryBank,
    pub x_before: ParameterVector,
    pub x_after: ParameterVector,
    pub wall_time_ms: f64,
}

impl RoundRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Event-log entries, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Started { session_id: String, schema_hash: String, seed: u64, solve: SolveConfig },
    Round { record: RoundRecord },
    Undone { round: u64, x_after: ParameterVector },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub schema_hash: String,
    pub seed: u64,
    pub solve: SolveConfig,
    /// Target of resets: the round-0 face, or the prior-mean face.
    pub base: ParameterVector,
    pub current: ParameterVector,
    pub bank: MemoryBank,
    pub rounds: Vec<RoundRecord>,
    /// Bumped exactly when `current` changes.
    pub version: u64,
    pub events: Vec<SessionEvent>,
}

impl Session {
    fn next_round(&self) -> u64 {
        self.rounds.last().map_or(1, |r| r.round + 1)
    }

    /// Earlier exchanges that still count, oldest first.
    pub fn dialogue(&self) -> Vec<DialogueTurn> {
        self.rounds
            .iter()
            .filter(|r| !r.undone)
            .map(|r| DialogueTurn { user: r.user_text.clone(), feedback: r.feedback.clone() })
            .collect()
    }

    fn push(&mut self, record: RoundRecord) {
        if !record.failed() && !record.x_after.bit_identical(&self.current) {
            self.current = record.x_after.clone();
            self.version += 1;
        }
        self.events.push(SessionEvent::Round { record: record.clone() });
        self.rounds.push(record);
    }
}

/// What a turn returns to the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub round: u64,
    pub feedback: String,
    pub suggestions: Vec<String>,
    pub edits: Vec<EditRecord>,
    pub error: Option<TurnError>,
    pub parser_source: charedit_core::ipm::ParserSource,
    pub parameters_version: u64,
}

impl TurnOutcome {
    pub fn from_record(record: &RoundRecord, version: u64) -> Self {
        TurnOutcome {
            round: record.round,
            feedback: record.feedback.clone(),
            suggestions: record.parsed.suggestions.clone(),
            edits: record.edits.clone(),
            error: record.error.clone(),
            parser_source: record.parsed.parser_source,
            parameters_version: version,
        }
    }
}

/// Shared, immutable machinery for running sessions.
pub struct Editor {
    pub engine: Arc<Engine>,
    pub ipm: Ipm,
    pub backend: Option<Arc<dyn LlmBackend>>,
    pub solve: SolveConfig,
}

impl Editor {
    pub fn new(engine: Arc<Engine>) -> Self {
        let ipm = Ipm::for_schema(&engine.schema);
        Editor { engine, ipm, backend: None, solve: SolveConfig::default() }
    }

    pub fn with_backend(mut self, backend: Arc<dyn LlmBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn prior_mean_face(&self) -> Result<ParameterVector, SessionError> {
        let e = &self.engine;
        let x = e.latent.decode(&e.prior.mu_z).map_err(|err| SessionError::Model(err.to_string()))?;
        Ok(snap_discrete(&x, &e.schema))
    }

    fn parse(&self, text: &str, session: &Session) -> Result<ParsedTurn, SessionError> {
        if text.trim().is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        let history = session.dialogue();
        Ok(self.ipm.parse_turn(text, &history, &session.bank, self.backend.as_deref())?)
    }

    fn blank(&self, id: String, seed: u64) -> Result<Session, SessionError> {
        let face = self.prior_mean_face()?;
        let solve = SolveConfig { seed, ..self.solve };
        let schema_hash = self.engine.schema.hash();
        Ok(Session {
            events: vec![SessionEvent::Started {
                session_id: id.clone(),
                schema_hash: schema_hash.clone(),
                seed,
                solve,
            }],
            id,
            schema_hash,
            seed,
            solve,
            base: face.clone(),
            current: face,
            bank: MemoryBank::new(),
            rounds: Vec::new(),
            version: 0,
        })
    }

    /// Opens a session at the prior-mean face, or builds round 0 from an
    /// initial description.
    pub fn start_session(&self, id: String, seed: u64, initial: Option<&str>) -> Result<Session, SessionError> {
        let mut session = self.blank(id, seed)?;
        if let Some(text) = initial.filter(|t| !t.trim().is_empty()) {
            let parsed = self.parse(text, &session)?;
            let record = self.run_create(&session, text, parsed, Instant::now())?;
            session.bank = apply_turn(&record.parsed, &session.bank).bank;
            session.base = record.x_after.clone();
            session.push(record);
        }
        Ok(session)
    }

    fn run_create(
        &self,
        s: &Session,
        text: &str,
        parsed: ParsedTurn,
        t0: Instant,
    ) -> Result<RoundRecord, SessionError> {
        let applied = apply_turn(&parsed, &s.bank);
        let m = self.engine.models();
        let mut x = s.current.clone();
        let mut edits = Vec::new();
        if applied.edits.is_empty() {
            let res = create(text, &s.solve, &m).map_err(SessionError::Create)?;
            x = res.x_final;
            edits.push(EditRecord {
                attribute_key: String::new(),
                prompt: text.to_string(),
                strength: 1.0,
                labels: Vec::new(),
                mask_source: MaskSource::WholeFace,
                channels: (0..x.len()).collect(),
                action: EditAction::Created,
                loss_initial: res.loss_trace.first().copied(),
                loss_final: res.loss_trace.last().copied(),
            });
        } else {
            for e in applied.edits.iter().filter(|e| e.strength > 0.0) {
                let (mask, labels, source) = self.mask_for(e);
                let res = create(&e.prompt, &s.solve, &m).map_err(SessionError::Create)?;
                x = mix(&x, &res.x_final, &mask, &self.engine.schema)
                    .map_err(|err| SessionError::Model(err.to_string()))?;
                edits.push(EditRecord {
                    attribute_key: e.attribute_key.clone(),
                    prompt: e.prompt.clone(),
                    strength: e.strength,
                    labels,
                    mask_source: source,
                    channels: mask.indices(),
                    action: EditAction::Created,
                    loss_initial: res.loss_trace.first().copied(),
                    loss_final: res.loss_trace.last().copied(),
                });
            }
        }
        Ok(RoundRecord {
            round: 0,
            kind: RoundKind::Create,
            user_text: text.to_string(),
            feedback: parsed.feedback.clone(),
            parsed,
            edits,
            error: None,
            undone: false,
            bank_before: s.bank.clone(),
            x_before: s.current.clone(),
            x_after: x,
            wall_time_ms: elapsed_ms(t0),
        })
    }

    /// Localizer labels joined with the parsed attribute's channels.
    fn mask_for(&self, e: &ResolvedEdit) -> (ChannelMask, Vec<String>, MaskSource) {
        let schema = &self.engine.schema;
        let loc = localize(&e.prompt, Some(&self.engine.localizer), schema, Some(&self.engine.lexicon));
        let known = schema.label_channel_map.contains_key(&e.attribute_key);
        let mut labels = loc.labels.clone();
        if known && !labels.contains(&e.attribute_key) {
            labels.push(e.attribute_key.clone());
        }
        let source = match loc.source {
            LocalizationSource::Model => MaskSource::Model,
            LocalizationSource::Lexicon => MaskSource::Lexicon,
            LocalizationSource::Unlocalized if known => MaskSource::Attribute,
            LocalizationSource::Unlocalized => MaskSource::WholeFace,
        };
        if labels.is_empty() {
            return (ChannelMask::ones(schema.len()), labels, source);
        }
        let mask = schema.label_mask(labels.iter().map(String::as_str));
        (mask, labels, source)
    }

    /// Parses and runs one dialogue turn.
    pub fn handle_turn(&self, session: &mut Session, text: &str) -> Result<TurnOutcome, SessionError> {
        let t0 = Instant::now();
        let parsed = self.parse(text, session)?;
        let record = self.execute(session, text, parsed, t0);
        if !record.failed() {
            session.bank = apply_turn(&record.parsed, &session.bank).bank;
        }
        session.push(record);
        let record = session.rounds.last().expect("just pushed");
        Ok(TurnOutcome::from_record(record, session.version))
    }

    /// Runs a parsed turn against the session state. Deterministic.
    fn execute(&self, s: &Session, text: &str, parsed: ParsedTurn, t0: Instant) -> RoundRecord {
        let applied = apply_turn(&parsed, &s.bank);
        let mut record = RoundRecord {
            round: s.next_round(),
            kind: RoundKind::Edit,
            user_text: text.to_string(),
            feedback: parsed.feedback.clone(),
            parsed,
            edits: Vec::new(),
            error: None,
            undone: false,
            bank_before: s.bank.clone(),
            x_before: s.current.clone(),
            x_after: s.current.clone(),
            wall_time_ms: 0.0,
        };
        let schema = &self.engine.schema;
        let m = self.engine.models();
        let mut x = if applied.reset_all { s.base.clone() } else { s.current.clone() };
        let mut edits = Vec::new();
        let mut failure = None;
        for e in &applied.edits {
            let (mask, labels, source) = self.mask_for(e);
            let mut rec = EditRecord {
                attribute_key: e.attribute_key.clone(),
                prompt: e.prompt.clone(),
                strength: e.strength,
                labels,
                mask_source: source,
                channels: mask.indices(),
                action: EditAction::Restored,
                loss_initial: None,
                loss_final: None,
            };
            if e.strength == 0.0 {
                match mix(&x, &s.base, &mask, schema) {
                    Ok(v) => x = v,
                    Err(err) => {
                        failure = Some(TurnError { code: "schema".into(), message: err.to_string() });
                        break;
                    }
                }
            } else {
                match edit(&x, &e.prompt, e.strength, &mask, &s.solve, &m) {
                    Ok(res) => {
                        rec.action = EditAction::Edited;
                        rec.loss_initial = res.loss_trace.first().copied();
                        rec.loss_final = res.loss_trace.last().copied();
                        x = res.x_final;
                    }
                    Err(err) => {
                        failure = Some(TurnError { code: solve_error_code(&err).into(), message: err.to_string() });
                        break;
                    }
                }
            }
            edits.push(rec);
        }
        match failure {
            Some(err) => {
                record.feedback = format!("Sorry, I could not apply that ({}). Nothing was changed.", err.message);
                record.error = Some(err);
            }
            None => {
                record.edits = edits;
                record.x_after = x;
            }
        }
        record.wall_time_ms = elapsed_ms(t0);
        record
    }

    /// Reverts the latest applied round that is not already undone.
    pub fn undo(&self, session: &mut Session) -> Result<u64, SessionError> {
        let idx = session
            .rounds
            .iter()
            .rposition(|r| r.kind == RoundKind::Edit && !r.undone && !r.failed())
            .ok_or(SessionError::NothingToUndo)?;
        let r = &mut session.rounds[idx];
        r.undone = true;
        if !r.x_before.bit_identical(&session.current) {
            session.version += 1;
        }
        session.current = r.x_before.clone();
        session.bank = r.bank_before.clone();
        let round = r.round;
        session.events.push(SessionEvent::Undone { round, x_after: session.current.clone() });
        Ok(round)
    }

    /// Rebuilds a session from its event log, re-running every round from
    /// its recorded parse and checking each outcome bit for bit.
    pub fn replay(&self, events: &[SessionEvent]) -> Result<Session, SessionError> {
        let diverged = |event: usize, message: String| SessionError::Replay { event, message };
        let Some(SessionEvent::Started { session_id, schema_hash, seed, solve }) = events.first() else {
            return Err(diverged(0, "log does not begin with a start event".into()));
        };
        if *schema_hash != self.engine.schema.hash() {
            return Err(diverged(0, format!("log was written for schema {schema_hash}")));
        }
        let mut s = self.blank(session_id.clone(), *seed)?;
        s.solve = *solve;
        s.events = vec![events[0].clone()];
        for (i, ev) in events.iter().enumerate().skip(1) {
            match ev {
                SessionEvent::Started { .. } => return Err(diverged(i, "second start event".into())),
                SessionEvent::Round { record } => {
                    let t0 = Instant::now();
                    let mut again = match record.kind {
                        RoundKind::Create => {
                            if !s.rounds.is_empty() {
                                return Err(diverged(i, "creation round after other rounds".into()));
                            }
                            self.run_create(&s, &record.user_text, record.parsed.clone(), t0)
                                .map_err(|e| diverged(i, e.to_string()))?
                        }
                        RoundKind::Edit => self.execute(&s, &record.user_text, record.parsed.clone(), t0),
                    };
                    if !again.x_after.bit_identical(&record.x_after) {
                        return Err(diverged(i, format!("round {} parameters differ", record.round)));
                    }
                    if again.round != record.round || again.error.is_some() != record.error.is_some() {
                        return Err(diverged(i, format!("round {} outcome differs", record.round)));
                    }
                    again.wall_time_ms = record.wall_time_ms;
                    if !again.failed() {
                        s.bank = apply_turn(&again.parsed, &s.bank).bank;
                    }
                    if again.kind == RoundKind::Create {
                        s.base = again.x_after.clone();
                    }
                    s.push(again);
                }
                SessionEvent::Undone { round, x_after } => {
                    let undone = self.undo(&mut s).map_err(|e| diverged(i, e.to_string()))?;
                    if undone != *round || !s.current.bit_identical(x_after) {
                        return Err(diverged(i, format!("undo of round {round} differs")));
                    }
                }
            }
        }
        Ok(s)
    }
}

fn solve_error_code(e: &SolveError) -> &'static str {
    match e {
        SolveError::Diverged { .. } => "solver_diverged",
        SolveError::Config(_) => "solver_config",
        SolveError::EmptyPrompt => "empty_prompt",
        _ => "model_error",
    }
}

fn elapsed_ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}
