use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::embedding::Embedder;
use crate::engine::EngineConfig;
use crate::evaluation::{generate_problem, Dataset, Family, GroundTruth, ProblemSpec, VarRange};
use crate::http::RetryPolicy;
use crate::llm::{Backend, LiveBackend, ReplayBackend, ScriptedBackend, ScriptedFixture, TranscriptEntry};

/// Where the data comes from: a built-in family (optionally overridden), a
/// custom synthetic spec, or a CSV file with a `__split__` column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub family: Option<Family>,
    pub dataset: Option<PathBuf>,
    pub target: Option<String>,
    #[serde(default)]
    pub time_ordered: bool,
    pub time_column: Option<String>,
    pub description: Option<String>,
    pub n_id: Option<usize>,
    pub n_ood: Option<usize>,
    pub noise_sd: Option<f64>,
    pub seed: Option<u64>,
    pub ground_truth: Option<String>,
    pub ground_truth_params: Option<Vec<f64>>,
    #[serde(default)]
    pub ranges: BTreeMap<String, VarRange>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    Local,
    Remote,
}

fn default_api_key_env() -> String {
    crate::llm::API_KEY_ENV.to_string()
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_inflight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub mode: BackendMode,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub embed_model: Option<String>,
    #[serde(default)]
    pub embedding: EmbeddingMode,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Scripted fixture (JSON).
    pub fixture: Option<PathBuf>,
    /// Recorded transcript for replay mode (JSON lines).
    pub transcript: Option<PathBuf>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptsSection {
    pub dir: Option<PathBuf>,
}

/// Continual mode: start from the knowledge library of an earlier run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySection {
    pub from_run: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { eps: 0.3, min_pts: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub engine: EngineConfig,
    pub backend: BackendSection,
    #[serde(default)]
    pub prompts: PromptsSection,
    #[serde(default)]
    pub library: LibrarySection,
    pub output: OutputSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn config_error(field: &str, message: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{field}: {message}"))
}

impl RunConfig {
    /// Parses TOML without touching the filesystem.
    pub fn parse(text: &str) -> Result<RunConfig, RunError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.engine
            .validate()
            .map_err(|m| config_error("engine", m))?;
        Ok(cfg)
    }

    /// Parses, resolves relative paths against the file's directory, and
    /// checks that every referenced path exists.
    pub fn load(path: &Path) -> Result<(RunConfig, String), RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check_paths()?;
        Ok((cfg, text))
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.problem.dataset);
        fix(&mut self.backend.fixture);
        fix(&mut self.backend.transcript);
        fix(&mut self.prompts.dir);
        fix(&mut self.library.from_run);
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
    }

    fn check_paths(&self) -> Result<(), RunError> {
        let exists = |field: &str, p: &Option<PathBuf>| match p {
            Some(path) if !path.exists() => {
                Err(config_error(field, format!("path does not exist: {}", path.display())))
            }
            _ => Ok(()),
        };
        exists("problem.dataset", &self.problem.dataset)?;
        exists("backend.fixture", &self.backend.fixture)?;
        exists("backend.transcript", &self.backend.transcript)?;
        exists("prompts.dir", &self.prompts.dir)?;
        exists("library.from_run", &self.library.from_run)?;
        match self.backend.mode {
            BackendMode::Live => {
                if self.backend.base_url.is_none() {
                    return Err(config_error("backend.base_url", "required in live mode"));
                }
                if self.backend.model.is_none() {
                    return Err(config_error("backend.model", "required in live mode"));
                }
            }
            BackendMode::Scripted if self.backend.fixture.is_none() => {
                return Err(config_error("backend.fixture", "required in scripted mode"));
            }
            BackendMode::Replay if self.backend.transcript.is_none() => {
                return Err(config_error("backend.transcript", "required in replay mode"));
            }
            _ => {}
        }
        if self.backend.embedding == EmbeddingMode::Remote
            && (self.backend.base_url.is_none() || self.backend.embed_model.is_none())
        {
            return Err(config_error(
                "backend.embed_model",
                "remote embeddings need base_url and embed_model",
            ));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.backend.retries,
            timeout: std::time::Duration::from_secs_f64(self.backend.timeout_s.max(0.001)),
            ..RetryPolicy::default()
        }
    }

    fn api_key(&self) -> Option<String> {
        api_key(&self.backend.api_key_env)
    }

    pub fn embedder(&self) -> Result<Embedder, RunError> {
        build_embedder(&EmbeddingSettings::from(&self.backend), self.retry_policy())
    }

    pub fn backend(&self) -> Result<Box<dyn Backend>, RunError> {
        match self.backend.mode {
            BackendMode::Live => Ok(Box::new(
                LiveBackend::new(
                    self.backend.base_url.as_deref().unwrap_or_default(),
                    self.backend.model.as_deref().unwrap_or_default(),
                    self.api_key(),
                    self.retry_policy(),
                )
                .map_err(|e| RunError::Backend(e.to_string()))?,
            )),
            BackendMode::Scripted => {
                let path = self.backend.fixture.as_ref().expect("checked at load");
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error("backend.fixture", e))?;
                let fixture: ScriptedFixture =
                    serde_json::from_str(&text).map_err(|e| config_error("backend.fixture", e))?;
                Ok(Box::new(ScriptedBackend::new(fixture).strict(self.backend.strict)))
            }
            BackendMode::Replay => {
                let path = self.backend.transcript.as_ref().expect("checked at load");
                let entries = read_transcript_file(path).map_err(|e| config_error("backend.transcript", e))?;
                Ok(Box::new(ReplayBackend::new(entries, self.backend.strict)))
            }
        }
    }

    /// Builds the problem spec (for generated data) or loads the CSV.
    pub fn dataset(&self) -> Result<(Dataset, String, BTreeMap<String, String>), RunError> {
        let p = &self.problem;
        match (p.family, &p.dataset) {
            (Some(_), Some(_)) => Err(config_error("problem", "set either family or dataset, not both")),
            (None, None) => Err(config_error("problem", "one of family or dataset is required")),
            (None, Some(path)) => {
                let target = p
                    .target
                    .as_deref()
                    .ok_or_else(|| config_error("problem.target", "required with a dataset file"))?;
                let file = std::fs::File::open(path).map_err(|e| config_error("problem.dataset", e))?;
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("dataset")
                    .to_string();
                let data = Dataset::read_csv(file, &name, target, p.time_ordered, p.time_column.clone())
                    .map_err(|e| config_error("problem.dataset", e))?;
                let description = p
                    .description
                    .clone()
                    .unwrap_or_else(|| format!("Find an expression for {target} in terms of the other columns."));
                Ok((data, description, p.notes.clone()))
            }
            (Some(family), None) => {
                let spec = self.problem_spec(family)?;
                let data = generate_problem(&spec).map_err(|e| config_error("problem", e))?;
                let mut notes = spec.variable_notes.clone();
                notes.extend(p.notes.clone());
                Ok((data, spec.description, notes))
            }
        }
    }

    pub fn problem_spec(&self, family: Family) -> Result<ProblemSpec, RunError> {
        let p = &self.problem;
        let mut spec = ProblemSpec::builtin(family);
        if let Some(t) = &p.target {
            spec.target = t.clone();
        }
        if let Some(d) = &p.description {
            spec.description = d.clone();
        }
        if let Some(v) = p.n_id {
            spec.sampling.n_id = v;
        }
        if let Some(v) = p.n_ood {
            spec.sampling.n_ood = v;
        }
        if let Some(v) = p.noise_sd {
            spec.sampling.noise_sd = v;
        }
        if let Some(v) = p.seed {
            spec.sampling.seed = v;
        }
        if !p.ranges.is_empty() {
            spec.sampling.ranges = p.ranges.clone();
        }
        match (&p.ground_truth, &p.ground_truth_params) {
            (Some(expression), Some(params)) => {
                spec.ground_truth = Some(GroundTruth {
                    expression: expression.clone(),
                    params: params.clone(),
                })
            }
            (None, None) => {}
            _ => {
                return Err(config_error(
                    "problem.ground_truth",
                    "ground_truth and ground_truth_params go together",
                ))
            }
        }
        if spec.description.is_empty() {
            spec.description = format!("Find an expression for {} in terms of the inputs.", spec.target);
        }
        Ok(spec)
    }
}

fn api_key(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|k| !k.is_empty())
}

/// The part of the backend section that replay needs again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSettings {
    pub mode: EmbeddingMode,
    pub base_url: Option<String>,
    pub embed_model: Option<String>,
    pub api_key_env: String,
}

impl From<&BackendSection> for EmbeddingSettings {
    fn from(b: &BackendSection) -> Self {
        EmbeddingSettings {
            mode: b.embedding,
            base_url: b.base_url.clone(),
            embed_model: b.embed_model.clone(),
            api_key_env: b.api_key_env.clone(),
        }
    }
}

pub fn build_embedder(settings: &EmbeddingSettings, policy: RetryPolicy) -> Result<Embedder, RunError> {
    match settings.mode {
        EmbeddingMode::Local => Ok(Embedder::Local),
        EmbeddingMode::Remote => Embedder::remote(
            settings.base_url.as_deref().unwrap_or_default(),
            settings.embed_model.as_deref().unwrap_or_default(),
            api_key(&settings.api_key_env),
            policy,
        )
        .map_err(|e| RunError::Backend(e.to_string())),
    }
}

pub fn read_transcript_file(path: &Path) -> std::io::Result<Vec<TranscriptEntry>> {
    let text = std::fs::read_to_string(path)?;
    crate::llm::read_transcript(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
