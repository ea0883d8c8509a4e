//! Service configuration: a TOML file, then environment overrides.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! artifacts = "artifacts/desk"   # omit to build the synthetic stack
//! scale = "desk"
//! build_seed = 1
//! session_dir = "sessions"       # omit to keep sessions in memory only
//!
//! [llm]
//! endpoint = "http://localhost:11434/v1/chat/completions"
//! model = "gpt-4o-mini"
//! timeout_secs = 30
//! ```
//!
//! | variable                | overrides        |
//! |-------------------------|------------------|
//! | `CHAREDIT_BIND`         | `bind`           |
//! | `CHAREDIT_ARTIFACTS`    | `artifacts`      |
//! | `CHAREDIT_SESSION_DIR`  | `session_dir`    |
//! | `CHAREDIT_LLM_ENDPOINT` | `llm.endpoint`   |
//! | `CHAREDIT_LLM_MODEL`    | `llm.model`      |
//! | `CHAREDIT_LLM_API_KEY`  | `llm.api_key`    |

use std::path::{Path, PathBuf};

use charedit_core::engine::Scale;
use charedit_core::solver::SolveConfig;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{var}: {message}")]
    Env { var: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub model: String,
    /// Usually supplied through the environment rather than the file.
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig { endpoint: None, model: "gpt-4o-mini".into(), api_key: None, timeout_secs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub artifacts: Option<PathBuf>,
    pub scale: Scale,
    pub build_seed: u64,
    pub session_dir: Option<PathBuf>,
    pub llm: LlmConfig,
    pub solver: SolveConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            artifacts: None,
            scale: Scale::Desk,
            build_seed: 1,
            session_dir: None,
            llm: LlmConfig::default(),
            solver: SolveConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let file = |message: String| ConfigError::File { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| file(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| file(e.to_string()))
    }

    /// Applies `CHAREDIT_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup("CHAREDIT_BIND") {
            self.bind = v;
        }
        if let Some(v) = lookup("CHAREDIT_ARTIFACTS") {
            self.artifacts = Some(v.into());
        }
        if let Some(v) = lookup("CHAREDIT_SESSION_DIR") {
            self.session_dir = Some(v.into());
        }
        if let Some(v) = lookup("CHAREDIT_LLM_ENDPOINT") {
            self.llm.endpoint = Some(v).filter(|s| !s.is_empty());
        }
        if let Some(v) = lookup("CHAREDIT_LLM_MODEL") {
            self.llm.model = v;
        }
        if let Some(v) = lookup("CHAREDIT_LLM_API_KEY") {
            self.llm.api_key = Some(v);
        }
        if self.llm.timeout_secs == 0 {
            return Err(ConfigError::Env { var: "llm.timeout_secs".into(), message: "must be positive".into() });
        }
        Ok(())
    }

    pub fn from_env_only() -> Result<Self, ConfigError> {
        let mut cfg = ServiceConfig::default();
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env() {
        let mut cfg = ServiceConfig::from_toml(
            "bind = \"0.0.0.0:9000\"\nscale = \"full\"\n[llm]\nendpoint = \"http://a\"\n[solver]\nsteps = 50\n",
        )
        .unwrap();
        assert_eq!(cfg.scale, Scale::Full);
        assert_eq!(cfg.solver.steps, 50);
        assert!(cfg.solver.group_gauge_projection);
        cfg.apply_env(|k| match k {
            "CHAREDIT_LLM_ENDPOINT" => Some("http://b".into()),
            "CHAREDIT_LLM_API_KEY" => Some("k".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.bind, "0.0.0.0:9000");
        assert_eq!(cfg.llm.endpoint.as_deref(), Some("http://b"));
        assert_eq!(cfg.llm.api_key.as_deref(), Some("k"));
        assert_eq!(cfg.llm.timeout_secs, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServiceConfig::from_toml("bnd = \"x\"").is_err());
    }

    #[test]
    fn empty_endpoint_disables_backend() {
        let mut cfg = ServiceConfig::default();
        cfg.apply_env(|k| (k == "CHAREDIT_LLM_ENDPOINT").then(String::new)).unwrap();
        assert_eq!(cfg.llm.endpoint, None);
    }
}
