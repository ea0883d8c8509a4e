//! Dialogue sessions on top of `charedit-core`: the round loop with undo and
//! replay, JSON-lines persistence, an HTTP API and an HTTP LLM client.

pub mod config;
pub mod http;
pub mod llm_client;
pub mod manager;
pub mod session;
pub mod store;

use std::sync::Arc;

use charedit_core::engine::{Engine, EngineError};

pub use config::ServiceConfig;
pub use manager::{ServiceError, SessionManager};
pub use session::{Editor, RoundRecord, Session, SessionError, SessionEvent, TurnOutcome};

/// Loads artifacts from disk when configured, otherwise builds the
/// synthetic stack from the configured scale and seed.
pub fn load_engine(cfg: &ServiceConfig) -> Result<Engine, EngineError> {
    match &cfg.artifacts {
        Some(dir) => Engine::load(dir),
        None => Engine::synthetic(cfg.scale, cfg.build_seed),
    }
}

/// Everything `serve` needs, minus the socket.
pub fn build_manager(cfg: &ServiceConfig, engine: Arc<Engine>) -> Result<SessionManager, ServiceError> {
    let mut editor = Editor::new(engine);
    editor.solve = cfg.solver;
    let backend =
        llm_client::HttpLlmBackend::from_config(&cfg.llm).map_err(|e| ServiceError::Internal(e.to_string()))?;
    if let Some(b) = backend {
        editor = editor.with_backend(Arc::new(b));
    }
    let store = cfg.session_dir.as_ref().map(store::SessionStore::open).transpose()?;
    let manager = SessionManager::new(editor, store);
    manager.resume_all()?;
    Ok(manager)
}
