//! `charedit`: command-line front end for the character parameter editor.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use charedit_core::engine::{Engine, Scale};
use charedit_core::localizer::localize;
use charedit_core::schema::{ParameterFile, ParameterVector};
use charedit_core::solver::{create, edit, SolveConfig};
use charedit_eval::{run_suite, Suite, Workbench};
use charedit_service::llm_client::HttpLlmBackend;
use charedit_service::store::{read_events, SessionStore};
use charedit_service::{build_manager, load_engine, Editor, ServiceConfig, Session};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "charedit", version, about = "Dialogue-driven game character parameter editor")]
struct Cli {
    #[command(flatten)]
    stack: StackArgs,
    #[command(subcommand)]
    command: Command,
}

/// Where the model stack comes from. Flags override the config file, which
/// is itself overridden by `CHAREDIT_*` variables.
#[derive(Args)]
struct StackArgs {
    /// TOML config file (same format as for `serve`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Load built artifacts instead of building the synthetic stack.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    /// Synthetic stack size: desk or full.
    #[arg(long, global = true)]
    scale: Option<Scale>,
    /// Seed of the synthetic stack build.
    #[arg(long, global = true)]
    build_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Interactive editing session on stdin.
    Chat {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Opening description of the character.
        #[arg(long)]
        describe: Option<String>,
        /// Append the session log under this directory.
        #[arg(long)]
        session_dir: Option<PathBuf>,
    },
    /// Create a face from a text prompt; prints the solve result as JSON.
    Solve {
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Edit an existing face; prints the solve result as JSON.
    Edit {
        prompt: String,
        #[arg(long, default_value_t = 0.5)]
        strength: f64,
        /// Parameter file `{schema_hash, values}`; the prior mean face if absent.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Comma-separated labels to edit; localized from the prompt if absent.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Labels and channel indices a prompt maps to.
    Localize { prompt: String },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        session_dir: Option<PathBuf>,
    },
    /// Rebuild a session from its log and verify every round.
    Replay { log: PathBuf },
    /// Evaluation suites.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Model artifacts.
    Artifacts {
        #[command(subcommand)]
        command: ArtifactsCommand,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Run one suite, or `all`, and write `<suite>.csv` and `<suite>.json`.
    Run {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ArtifactsCommand {
    /// Build the synthetic stack and save it as JSON artifacts.
    Build {
        #[arg(long, default_value = "desk")]
        scale: Scale,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

impl StackArgs {
    fn config(&self) -> Result<ServiceConfig> {
        let mut cfg = match &self.config {
            Some(path) => ServiceConfig::load(path)?,
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        if let Some(a) = &self.artifacts {
            cfg.artifacts = Some(a.clone());
        }
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        if let Some(s) = self.build_seed {
            cfg.build_seed = s;
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = cli.stack.config()?;
    match cli.command {
        Command::Chat { seed, describe, session_dir } => chat(&cfg, seed, describe.as_deref(), session_dir),
        Command::Solve { prompt, seed, steps } => {
            let e = engine(&cfg)?;
            let mut solve = SolveConfig { seed, ..cfg.solver };
            if let Some(s) = steps {
                solve.steps = s;
            }
            println!("{}", create(&prompt, &solve, &e.models())?.to_json());
            Ok(())
        }
        Command::Edit { prompt, strength, params, labels, seed } => {
            let e = engine(&cfg)?;
            let x = match params {
                Some(p) => read_params(&p, &e)?,
                None => Editor::new(Arc::clone(&e)).prior_mean_face()?,
            };
            let mask = if labels.is_empty() {
                localize(&prompt, Some(&e.localizer), &e.schema, Some(&e.lexicon)).mask
            } else {
                for l in &labels {
                    if !e.schema.label_channel_map.contains_key(l) {
                        bail!("unknown label `{l}`; known: {}", e.schema.labels().join(", "));
                    }
                }
                e.schema.label_mask(labels.iter().map(String::as_str))
            };
            let solve = SolveConfig { seed, ..cfg.solver };
            println!("{}", edit(&x, &prompt, strength, &mask, &solve, &e.models())?.to_json());
            Ok(())
        }
        Command::Localize { prompt } => {
            let e = engine(&cfg)?;
            let loc = localize(&prompt, Some(&e.localizer), &e.schema, Some(&e.lexicon));
            let out =
                json!({ "prompt": prompt, "labels": loc.labels, "source": loc.source, "channels": loc.mask.indices() });
            println!("{out}");
            Ok(())
        }
        Command::Serve { bind, session_dir } => {
            let mut cfg = cfg;
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if session_dir.is_some() {
                cfg.session_dir = session_dir;
            }
            serve(cfg)
        }
        Command::Replay { log } => {
            let e = engine(&cfg)?;
            let events = read_events(&log)?;
            let s = Editor::new(e).replay(&events).with_context(|| format!("replaying {}", log.display()))?;
            let out = json!({
                "session_id": s.id,
                "events": s.events.len(),
                "rounds": s.rounds.len(),
                "parameters_version": s.version,
                "values": s.current,
                "memory": s.bank,
            });
            println!("{out}");
            Ok(())
        }
        Command::Eval { command: EvalCommand::Run { suite, seed, out } } => eval_run(&suite, seed, &out),
        Command::Artifacts { command: ArtifactsCommand::Build { scale, seed, out } } => {
            let e = Engine::synthetic(scale, seed)?;
            e.save(&out)?;
            let m = &e.manifest.localizer_holdout;
            println!(
                "wrote {} (schema {}, {} channels, latent {}, localizer held-out F1 {:.4})",
                out.display(),
                e.manifest.schema_hash,
                e.schema.len(),
                e.latent.dim(),
                m.micro_f1
            );
            Ok(())
        }
    }
}

fn engine(cfg: &ServiceConfig) -> Result<Arc<Engine>> {
    Ok(Arc::new(load_engine(cfg).context("loading the model stack")?))
}

fn read_params(path: &Path, e: &Engine) -> Result<ParameterVector> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ParameterFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(file.into_checked(&e.schema)?)
}

fn serve(cfg: ServiceConfig) -> Result<()> {
    let engine = engine(&cfg)?;
    let manager = Arc::new(build_manager(&cfg, engine)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener =
            tokio::net::TcpListener::bind(&cfg.bind).await.with_context(|| format!("binding {}", cfg.bind))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        charedit_service::http::serve(listener, manager).await?;
        Ok(())
    })
}

fn eval_run(suite: &str, seed: u64, out: &Path) -> Result<()> {
    let suites = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse::<Suite>()?] };
    let wb = Workbench::new(seed);
    let mut failed = Vec::new();
    for s in suites {
        let report = run_suite(s, &wb)?;
        let (csv, _) = report.write(out)?;
        for v in &report.verdicts {
            let mark = if v.passed { "PASS" } else { "FAIL" };
            println!("criterion {:>2} [{mark}] {}: {}", v.criterion, v.name, v.detail);
        }
        if !report.passed() {
            failed.push(s.id());
        }
        eprintln!("  wrote {}", csv.display());
    }
    if !failed.is_empty() {
        bail!("failed: {}", failed.join(", "));
    }
    Ok(())
}

fn chat(cfg: &ServiceConfig, seed: u64, describe: Option<&str>, session_dir: Option<PathBuf>) -> Result<()> {
    let mut editor = Editor::new(engine(cfg)?);
    editor.solve = cfg.solver;
    if let Some(b) = HttpLlmBackend::from_config(&cfg.llm)? {
        editor = editor.with_backend(Arc::new(b));
    }
    let store = session_dir.or_else(|| cfg.session_dir.clone()).map(SessionStore::open).transpose()?;
    let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let mut session = editor.start_session(format!("chat-{millis}"), seed, describe)?;
    let mut persisted = 0;
    let mut save = |s: &Session| -> Result<()> {
        if let Some(store) = &store {
            persisted = store.append(s, persisted)?;
        }
        Ok(())
    };
    save(&session)?;
    if let Some(r) = session.rounds.first() {
        println!("{}", r.feedback);
    }
    if let Some(store) = &store {
        eprintln!("logging to {}", store.log_path(&session.id)?.display());
    }
    eprintln!("commands: /undo /params /memory /quit");
    let stdin = io::stdin();
    loop {
        print!("> ");
        io::stdout().flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" | "/exit" => break,
            "/params" => println!("{}", serde_json::to_string(&session.current)?),
            "/memory" => println!("{}", serde_json::to_string_pretty(&session.bank)?),
            "/undo" => match editor.undo(&mut session) {
                Ok(round) => {
                    save(&session)?;
                    println!("undid round {round}");
                }
                Err(e) => println!("{e}"),
            },
            text => {
                let out = editor.handle_turn(&mut session, text)?;
                save(&session)?;
                println!("{}", out.feedback);
                for e in &out.edits {
                    println!("  {} \"{}\" s={} ({} channels)", e.attribute_key, e.prompt, e.strength, e.channels.len());
                }
                if !out.suggestions.is_empty() {
                    println!("  try: {}", out.suggestions.join(" | "));
                }
            }
        }
    }
    Ok(())
}
