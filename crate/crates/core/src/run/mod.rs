//! The `run`, `report` and `replay` commands over a run directory.

pub mod config;
pub mod report;
pub mod store;

use std::fs::{File, OpenOptions};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{Engine, EngineConfig, EngineError, RunState};
use crate::evaluation::Dataset;
use crate::http::RetryPolicy;
use crate::idea_tree::TaskContext;
use crate::knowledge::KnowledgeLibrary;
use crate::llm::{Gateway, GatewayError, ReplayBackend};
use crate::prompts::PromptSet;
use crate::solution::Evaluator;

pub use config::RunConfig;
pub use store::{Manifest, RunDir, RunDirSink};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("replay diverged: {0}")]
    Divergence(String),
    #[error("missing run: {0}")]
    MissingRun(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Backend(_) => EXIT_BACKEND,
            RunError::Divergence(_) => EXIT_DIVERGENCE,
            RunError::MissingRun(_) | RunError::Io(_) => EXIT_OTHER,
        }
    }

    fn from_engine(e: EngineError, replaying: bool) -> RunError {
        match e {
            EngineError::Gateway(g @ (GatewayError::TranscriptExhausted { .. } | GatewayError::Divergence { .. })) => {
                if replaying {
                    RunError::Divergence(g.to_string())
                } else {
                    RunError::Backend(g.to_string())
                }
            }
            EngineError::Gateway(GatewayError::Io(io)) | EngineError::Sink(io) => RunError::Io(io),
            EngineError::Gateway(g) => RunError::Backend(g.to_string()),
            EngineError::Config(m) => RunError::Config(format!("engine: {m}")),
        }
    }
}

/// Exit status for a command result.
pub fn exit_code<T>(result: &Result<T, RunError>) -> i32 {
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => e.exit_code(),
    }
}

/// What the engine needs beyond the backend, rebuilt identically for fresh
/// runs, resumes and replays.
struct Setup {
    data: Arc<Dataset>,
    prompts: PromptSet,
    context: TaskContext,
}

impl Setup {
    fn new(data: Dataset, prompts: PromptSet, manifest: &Manifest) -> Setup {
        let context = TaskContext::new(&manifest.description, &data, &manifest.notes_list());
        Setup {
            data: Arc::new(data),
            prompts,
            context,
        }
    }

    fn engine<'a>(&'a self, config: &'a EngineConfig, embedder: &'a crate::embedding::Embedder) -> Engine<'a> {
        Engine {
            config,
            evaluator: Evaluator::new(self.data.clone(), config.fit, config.seed),
            prompts: &self.prompts,
            embedder,
            context: self.context.clone(),
        }
    }
}

fn load_prompts(dir: &Path, field: &str) -> Result<PromptSet, RunError> {
    PromptSet::load(dir).map_err(|e| RunError::Config(format!("{field}: {e}")))
}

fn transcript_writer(dir: &RunDir, append: bool) -> std::io::Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(dir.transcript())
}

/// `coevo run <config> [--resume]`.
pub fn cmd_run(config_path: &Path, resume: bool) -> Result<RunState, RunError> {
    let (cfg, raw) = RunConfig::load(config_path)?;
    let dir = RunDir::new(&cfg.output.dir);
    if resume {
        resume_run(&cfg, &dir)
    } else {
        fresh_run(&cfg, &raw, &dir)
    }
}

fn fresh_run(cfg: &RunConfig, raw: &str, dir: &RunDir) -> Result<RunState, RunError> {
    if dir.checkpoint().exists() {
        return Err(RunError::Config(format!(
            "output.dir: {} already holds a run; pass --resume or choose another directory",
            dir.root.display()
        )));
    }
    let (data, description, notes) = cfg.dataset()?;
    let prompts = match &cfg.prompts.dir {
        Some(p) => load_prompts(p, "prompts.dir")?,
        None => PromptSet::default(),
    };
    let library = match &cfg.library.from_run {
        Some(prev) => RunDir::new(prev)
            .read_checkpoint()
            .map_err(|e| RunError::Config(format!("library.from_run: {e}")))?
            .library,
        None => KnowledgeLibrary::new(cfg.engine.library, cfg.engine.seed),
    };
    let embedder = cfg.embedder()?;
    let backend = cfg.backend()?;
    let manifest = Manifest {
        version: store::MANIFEST_VERSION,
        engine: cfg.engine.clone(),
        description,
        notes,
        dataset: store::DatasetMeta::of(&data),
        embedding: config::EmbeddingSettings::from(&cfg.backend),
        backend_id: backend.id(),
        strict: cfg.backend.strict,
        max_inflight: cfg.backend.max_inflight,
        report: cfg.report,
        seeded_library: cfg.library.from_run.is_some(),
    };

    std::fs::create_dir_all(&dir.root)?;
    store::atomic_write(&dir.config(), raw.as_bytes())?;
    dir.write_dataset(&data)?;
    dir.write_prompts(&prompts)?;
    if manifest.seeded_library {
        store::write_initial_library(dir, &library)?;
    }
    store::write_json(&dir.manifest(), &manifest)?;

    let setup = Setup::new(data, prompts, &manifest);
    let engine = setup.engine(&cfg.engine, &embedder);
    let mut gateway = Gateway::new(backend)
        .with_max_inflight(cfg.backend.max_inflight)
        .with_sink(transcript_writer(dir, false)?);
    let mut sink = RunDirSink::open(dir.clone(), false)?;
    engine
        .run(library, &mut gateway, &mut sink)
        .map_err(|e| RunError::from_engine(e, false))
}

/// Continues from `checkpoint.json`, cutting any log lines written after it.
/// The engine section comes from the (possibly edited) config, so a run can
/// be extended with more generations; data, prompts and problem text come
/// from the run directory.
fn resume_run(cfg: &RunConfig, dir: &RunDir) -> Result<RunState, RunError> {
    dir.require_run()?;
    let mut manifest = dir.read_manifest()?;
    let state = dir.read_checkpoint()?;
    let data = dir.read_dataset(&manifest.dataset)?;
    let prompts = load_prompts(&dir.prompts(), "run prompts")?;
    let embedder = cfg.embedder()?;
    let backend = cfg.backend()?;

    let transcript_text = store::truncate_lines(&dir.transcript(), state.transcript_len)?;
    let entries = crate::llm::read_transcript(&transcript_text)
        .map_err(|e| RunError::Io(store::invalid_data(e.to_string())))?;
    store::truncate_lines(&dir.solutions(), state.solutions_logged)?;

    manifest.engine = cfg.engine.clone();
    store::write_json(&dir.manifest(), &manifest)?;

    let setup = Setup::new(data, prompts, &manifest);
    let engine = setup.engine(&cfg.engine, &embedder);
    let mut gateway = Gateway::new(backend)
        .with_max_inflight(cfg.backend.max_inflight)
        .with_sink(transcript_writer(dir, true)?);
    gateway.resume(entries, &state.backend_cursor);
    let mut sink = RunDirSink::open(dir.clone(), true)?;
    engine
        .continue_run(state, &mut gateway, &mut sink)
        .map_err(|e| RunError::from_engine(e, false))
}

/// `coevo report <dir>`.
pub fn cmd_report(dir: &Path) -> Result<Vec<std::path::PathBuf>, RunError> {
    report::write_report(&RunDir::new(dir))
}

/// Outcome of a matching replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub entries_used: u64,
    pub solutions: u64,
    pub generation: u64,
}

/// `coevo replay <dir> [--strict]`: re-executes the engine against the
/// recorded transcript into `<dir>/replay/` and requires the replayed
/// solution log and final state to equal the recorded ones.
pub fn cmd_replay(root: &Path, strict: bool) -> Result<ReplayReport, RunError> {
    let dir = RunDir::new(root);
    dir.require_run()?;
    let manifest = dir.read_manifest()?;
    let recorded = dir.read_checkpoint()?;
    let data = dir.read_dataset(&manifest.dataset)?;
    let prompts = load_prompts(&dir.prompts(), "run prompts")?;
    let embedder = config::build_embedder(&manifest.embedding, RetryPolicy::default())?;
    let library = if manifest.seeded_library {
        store::read_json(&dir.initial_library())?
    } else {
        KnowledgeLibrary::new(manifest.engine.library, manifest.engine.seed)
    };

    let transcript = config::read_transcript_file(&dir.transcript())
        .map_err(|e| RunError::MissingRun(format!("{}: {e}", dir.transcript().display())))?;
    let recorded_len = recorded.transcript_len as usize;
    let entries: Vec<_> = transcript.into_iter().take(recorded_len).collect();
    let available = entries.len() as u64;

    let out = RunDir::new(dir.replay());
    if out.root.exists() {
        std::fs::remove_dir_all(&out.root)?;
    }
    std::fs::create_dir_all(&out.root)?;

    // Replay only as far as the recorded checkpoint.
    let mut engine_cfg = manifest.engine.clone();
    engine_cfg.generations = recorded.generation as usize;
    let setup = Setup::new(data, prompts, &manifest);
    let engine = setup.engine(&engine_cfg, &embedder);
    let mut gateway = Gateway::new(Box::new(ReplayBackend::new(entries, strict || manifest.strict)))
        .with_sink(transcript_writer(&out, false)?);
    let mut sink = RunDirSink::open(out.clone(), false)?;
    let result = engine
        .run(library, &mut gateway, &mut sink)
        .map_err(|e| RunError::from_engine(e, true));
    drop(sink);
    let replayed = match result {
        Ok(state) => state,
        Err(e) => {
            report_divergence(&out, &e.to_string());
            return Err(e);
        }
    };

    let mismatch = compare_replay(&dir, &out, &recorded, &replayed, available);
    if let Some(detail) = mismatch {
        report_divergence(&out, &detail);
        return Err(RunError::Divergence(detail));
    }
    Ok(ReplayReport {
        entries_used: replayed.transcript_len,
        solutions: replayed.solutions_logged,
        generation: replayed.generation,
    })
}

fn report_divergence(out: &RunDir, detail: &str) {
    let _ = std::fs::write(out.root.join("divergence.txt"), format!("{detail}\n"));
}

fn compare_replay(
    dir: &RunDir,
    out: &RunDir,
    recorded: &RunState,
    replayed: &RunState,
    available: u64,
) -> Option<String> {
    if available < recorded.transcript_len {
        return Some(format!(
            "transcript holds {available} entries, checkpoint recorded {}",
            recorded.transcript_len
        ));
    }
    if replayed.transcript_len != recorded.transcript_len {
        return Some(format!(
            "replay consumed {} transcript entries, run recorded {}",
            replayed.transcript_len, recorded.transcript_len
        ));
    }
    let recorded_log = std::fs::read(dir.solutions()).unwrap_or_default();
    let replayed_log = std::fs::read(out.solutions()).unwrap_or_default();
    if recorded_log != replayed_log {
        let line = first_differing_line(&recorded_log, &replayed_log);
        return Some(format!("solution logs differ from line {line}"));
    }
    // Backend cursors are backend-specific; everything else must match.
    let strip = |s: &RunState| {
        let mut s = s.clone();
        s.backend_cursor = Default::default();
        store::state_json(&s)
    };
    if strip(recorded) != strip(replayed) {
        return Some("final run state differs from checkpoint.json".into());
    }
    None
}

fn first_differing_line(a: &[u8], b: &[u8]) -> usize {
    let a = String::from_utf8_lossy(a);
    let b = String::from_utf8_lossy(b);
    let mut la = a.lines();
    let mut lb = b.lines();
    let mut n = 1;
    loop {
        match (la.next(), lb.next()) {
            (None, None) => return n,
            (x, y) if x != y => return n,
            _ => n += 1,
        }
    }
}
