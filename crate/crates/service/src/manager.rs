//! Live sessions behind per-session locks, with optional on-disk logs.
//!
//! Every method blocks. Different sessions run in parallel; calls on one
//! session queue on its lock in arrival order (the lock is FIFO-fair).

use std::sync::Arc;

use charedit_core::engine::Engine;
use charedit_core::ipm::MemoryBank;
use charedit_core::schema::ParameterVector;
use charedit_core::semantic::Preview;
use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Mutex;

use crate::session::{Editor, RoundRecord, Session, SessionError, TurnOutcome};
use crate::store::{read_events, SessionStore, Snapshot, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no session with id `{0}`")]
    SessionNotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    /// Stable machine-readable code for the error envelope.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::SessionNotFound(_) => "session_not_found",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Session(e) => match e {
                SessionError::EmptyMessage => "bad_request",
                SessionError::NothingToUndo => "nothing_to_undo",
                SessionError::Parser(_) => "parser_unavailable",
                SessionError::Create(_) => "creation_failed",
                SessionError::Model(_) => "model_error",
                SessionError::Replay { .. } => "replay_mismatch",
            },
            ServiceError::Store(_) => "storage_error",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn detail(&self) -> Value {
        match self {
            ServiceError::SessionNotFound(id) => json!({ "session_id": id }),
            ServiceError::Session(SessionError::Replay { event, .. }) => json!({ "event": event }),
            _ => Value::Null,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub seed: Option<u64>,
    pub initial_description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametersView {
    pub session_id: String,
    pub parameters_version: u64,
    pub schema_hash: String,
    pub values: ParameterVector,
    pub latent: Vec<f64>,
    pub preview: Preview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub session_id: String,
    pub parameters_version: u64,
    pub bank: MemoryBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub seed: u64,
    /// The creation round, when an initial description was given.
    pub round: Option<TurnOutcome>,
    pub memory: MemoryView,
    pub parameters: ParametersView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageView {
    pub session_id: String,
    #[serde(flatten)]
    pub outcome: TurnOutcome,
    pub memory: MemoryView,
    pub parameters: ParametersView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndoView {
    pub session_id: String,
    pub undone_round: u64,
    pub memory: MemoryView,
    pub parameters: ParametersView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub session_id: String,
    pub rounds: Vec<RoundRecord>,
}

struct Live {
    session: Session,
    persisted: usize,
}

pub struct SessionManager {
    editor: Arc<Editor>,
    sessions: DashMap<String, Arc<Mutex<Live>>>,
    store: Option<SessionStore>,
}

impl SessionManager {
    pub fn new(editor: Editor, store: Option<SessionStore>) -> Self {
        SessionManager { editor: Arc::new(editor), sessions: DashMap::new(), store }
    }

    pub fn editor(&self) -> &Editor {
        &self.editor
    }

    pub fn engine(&self) -> &Engine {
        &self.editor.engine
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Replays every log in the store and registers the sessions.
    pub fn resume_all(&self) -> Result<usize, ServiceError> {
        let Some(store) = &self.store else { return Ok(0) };
        let mut n = 0;
        for id in store.list()? {
            let events = read_events(&store.log_path(&id)?)?;
            let session = self.editor.replay(&events)?;
            if let Some(snap) = store.read_snapshot(&id)? {
                let partial = self.editor.replay(&events[..snap.events.min(events.len())])?;
                if !Snapshot::of(&partial).matches(&snap) {
                    return Err(ServiceError::Internal(format!("snapshot of {id} disagrees with its log")));
                }
            }
            let persisted = session.events.len();
            self.sessions.insert(id, Arc::new(Mutex::new(Live { session, persisted })));
            n += 1;
        }
        tracing::info!(sessions = n, "resumed sessions from the store");
        Ok(n)
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Live>>, ServiceError> {
        self.sessions.get(id).map(|e| Arc::clone(e.value())).ok_or_else(|| ServiceError::SessionNotFound(id.into()))
    }

    fn persist(&self, live: &mut Live) -> Result<(), ServiceError> {
        if let Some(store) = &self.store {
            live.persisted = store.append(&live.session, live.persisted)?;
        }
        Ok(())
    }

    pub fn create(&self, req: CreateSession) -> Result<SessionView, ServiceError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let seed = req.seed.unwrap_or(0);
        let session = self.editor.start_session(id.clone(), seed, req.initial_description.as_deref())?;
        let mut live = Live { session, persisted: 0 };
        self.persist(&mut live)?;
        let s = &live.session;
        let view = SessionView {
            session_id: id.clone(),
            seed,
            round: s.rounds.first().map(|r| TurnOutcome::from_record(r, s.version)),
            memory: self.memory_of(s),
            parameters: self.parameters_of(s)?,
        };
        self.sessions.insert(id, Arc::new(Mutex::new(live)));
        Ok(view)
    }

    pub fn message(&self, id: &str, text: &str) -> Result<MessageView, ServiceError> {
        let entry = self.get(id)?;
        let mut live = entry.blocking_lock();
        let outcome = self.editor.handle_turn(&mut live.session, text)?;
        if let Some(err) = &outcome.error {
            tracing::warn!(session = id, round = outcome.round, code = %err.code, "turn rolled back");
        }
        self.persist(&mut live)?;
        Ok(MessageView {
            session_id: id.into(),
            outcome,
            memory: self.memory_of(&live.session),
            parameters: self.parameters_of(&live.session)?,
        })
    }

    pub fn undo(&self, id: &str) -> Result<UndoView, ServiceError> {
        let entry = self.get(id)?;
        let mut live = entry.blocking_lock();
        let undone_round = self.editor.undo(&mut live.session)?;
        self.persist(&mut live)?;
        Ok(UndoView {
            session_id: id.into(),
            undone_round,
            memory: self.memory_of(&live.session),
            parameters: self.parameters_of(&live.session)?,
        })
    }

    pub fn parameters(&self, id: &str) -> Result<ParametersView, ServiceError> {
        let entry = self.get(id)?;
        let live = entry.blocking_lock();
        self.parameters_of(&live.session)
    }

    pub fn memory(&self, id: &str) -> Result<MemoryView, ServiceError> {
        let entry = self.get(id)?;
        let live = entry.blocking_lock();
        Ok(self.memory_of(&live.session))
    }

    pub fn history(&self, id: &str) -> Result<HistoryView, ServiceError> {
        let entry = self.get(id)?;
        let live = entry.blocking_lock();
        Ok(HistoryView { session_id: id.into(), rounds: live.session.rounds.clone() })
    }

    /// A copy of the full session state, for tests and tooling.
    pub fn snapshot(&self, id: &str) -> Result<Session, ServiceError> {
        let entry = self.get(id)?;
        let live = entry.blocking_lock();
        Ok(live.session.clone())
    }

    fn memory_of(&self, s: &Session) -> MemoryView {
        MemoryView { session_id: s.id.clone(), parameters_version: s.version, bank: s.bank.clone() }
    }

    fn parameters_of(&self, s: &Session) -> Result<ParametersView, ServiceError> {
        let e = &self.editor.engine;
        let z = e.latent.encode(&s.current).map_err(|err| ServiceError::Internal(err.to_string()))?;
        Ok(ParametersView {
            session_id: s.id.clone(),
            parameters_version: s.version,
            schema_hash: s.schema_hash.clone(),
            values: s.current.clone(),
            latent: z.iter().copied().collect(),
            preview: e.face.preview(&s.current),
        })
    }
}
