//! Evaluation suites. Each suite is deterministic for a seed, checks one
//! acceptance criterion and returns an [`ExperimentReport`].
//!
//! | suite             | criterion | scale       |
//! |-------------------|-----------|-------------|
//! | `gradients`       | 1         | desk + full |
//! | `masks`           | 2         | full        |
//! | `strength`        | 3         | full        |
//! | `latent`          | 4         | full        |
//! | `prior`           | 5         | full        |
//! | `zlpr`            | 6         | n/a         |
//! | `localizer`       | 7         | desk + full |
//! | `dialogue-golden` | 8         | desk        |
//! | `latency`         | 9         | full        |
//! | `replay`          | 10        | full        |
//!
//! Image-based scores and user studies cannot be reproduced without the game
//! engine, pretrained image-text models and human raters; these property
//! suites stand in for them.

pub mod dialogue;
pub mod gradients;
pub mod localizer;
pub mod report;
pub mod solver;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use charedit_core::engine::{Engine, EngineError, Scale};
use thiserror::Error;

pub use report::{Environment, ExperimentReport, Table, Verdict};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Gradients,
    Masks,
    Strength,
    Latent,
    Prior,
    Zlpr,
    Localizer,
    DialogueGolden,
    Latency,
    Replay,
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::Gradients,
        Suite::Masks,
        Suite::Strength,
        Suite::Latent,
        Suite::Prior,
        Suite::Zlpr,
        Suite::Localizer,
        Suite::DialogueGolden,
        Suite::Latency,
        Suite::Replay,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Masks => "masks",
            Suite::Strength => "strength",
            Suite::Latent => "latent",
            Suite::Prior => "prior",
            Suite::Zlpr => "zlpr",
            Suite::Localizer => "localizer",
            Suite::DialogueGolden => "dialogue-golden",
            Suite::Latency => "latency",
            Suite::Replay => "replay",
        }
    }

    pub fn criterion(self) -> u32 {
        Suite::ALL.iter().position(|s| *s == self).expect("listed") as u32 + 1
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Suite {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Suite::ALL.into_iter().find(|x| x.id() == s).ok_or_else(|| EvalError::UnknownSuite(s.into()))
    }
}

/// Lazily built engines shared by the suites of one run.
pub struct Workbench {
    pub seed: u64,
    engines: Mutex<Vec<((Scale, u64), Arc<Engine>)>>,
}

impl Workbench {
    pub fn new(seed: u64) -> Self {
        Workbench { seed, engines: Mutex::new(Vec::new()) }
    }

    pub fn engine(&self, scale: Scale) -> Result<Arc<Engine>, EvalError> {
        self.engine_with_seed(scale, self.seed)
    }

    pub fn engine_with_seed(&self, scale: Scale, seed: u64) -> Result<Arc<Engine>, EvalError> {
        let mut cache = self.engines.lock().expect("engine cache");
        if let Some((_, e)) = cache.iter().find(|(k, _)| *k == (scale, seed)) {
            return Ok(Arc::clone(e));
        }
        let e = Arc::new(Engine::synthetic(scale, seed)?);
        cache.push(((scale, seed), Arc::clone(&e)));
        Ok(e)
    }
}

pub fn run_suite(suite: Suite, wb: &Workbench) -> Result<ExperimentReport, EvalError> {
    match suite {
        Suite::Gradients => gradients::run(wb),
        Suite::Masks => solver::masks(wb),
        Suite::Strength => solver::strength(wb),
        Suite::Latent => solver::latent(wb),
        Suite::Prior => solver::prior(wb),
        Suite::Zlpr => localizer::zlpr(wb),
        Suite::Localizer => localizer::quality(wb),
        Suite::DialogueGolden => dialogue::golden(wb),
        Suite::Latency => dialogue::latency(wb),
        Suite::Replay => dialogue::replay(wb),
    }
}

pub(crate) fn report(
    suite: Suite,
    wb: &Workbench,
    config: serde_json::Value,
    table: Table,
    verdict: (bool, String),
    timing: serde_json::Value,
) -> ExperimentReport {
    ExperimentReport {
        experiment: suite.id().into(),
        seed: wb.seed,
        config,
        table,
        verdicts: vec![Verdict {
            criterion: suite.criterion(),
            name: suite.id().into(),
            passed: verdict.0,
            detail: verdict.1,
        }],
        timing,
        environment: Environment::current(),
    }
}
