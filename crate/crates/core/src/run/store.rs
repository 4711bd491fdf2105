//! Run directory layout and writers.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{EmbeddingSettings, ReportSection};
use super::RunError;
use crate::engine::{BestPoint, EngineConfig, RunSink, RunState, ValidPoint};
use crate::evaluation::Dataset;
use crate::knowledge::KnowledgeLibrary;
use crate::prompts::PromptSet;
use crate::solution::{ext_real, Solution};

pub const MANIFEST_VERSION: u32 = 1;

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts")
    }
    pub fn initial_library(&self) -> PathBuf {
        self.root.join("initial_library.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn transcript(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }
    pub fn solutions(&self) -> PathBuf {
        self.root.join("solutions.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn replay(&self) -> PathBuf {
        self.root.join("replay")
    }

    pub fn require_run(&self) -> Result<(), RunError> {
        for path in [self.manifest(), self.checkpoint(), self.dataset()] {
            if !path.is_file() {
                return Err(RunError::MissingRun(format!("{} not found", path.display())));
            }
        }
        Ok(())
    }

    pub fn read_manifest(&self) -> Result<Manifest, RunError> {
        read_json(&self.manifest())
    }

    pub fn read_checkpoint(&self) -> Result<RunState, RunError> {
        read_json(&self.checkpoint())
    }

    pub fn read_dataset(&self, meta: &DatasetMeta) -> Result<Dataset, RunError> {
        let file = File::open(self.dataset())?;
        Dataset::read_csv(file, &meta.name, &meta.target, meta.time_ordered, meta.time_column.clone())
            .map_err(|e| RunError::Io(invalid_data(format!("{}: {e}", self.dataset().display()))))
    }

    pub fn write_dataset(&self, data: &Dataset) -> Result<(), RunError> {
        let mut buf = Vec::new();
        data.write_csv(&mut buf)
            .map_err(|e| RunError::Io(invalid_data(e.to_string())))?;
        atomic_write(&self.dataset(), &buf)?;
        Ok(())
    }

    pub fn write_prompts(&self, prompts: &PromptSet) -> std::io::Result<()> {
        let dir = self.prompts();
        std::fs::create_dir_all(&dir)?;
        for name in prompts.names() {
            atomic_write(&dir.join(format!("{name}.txt")), format!("{}\n", prompts.get(name)).as_bytes())?;
        }
        Ok(())
    }
}

/// Everything besides the raw config that a later `report`, `replay` or
/// resume needs to rebuild the run without the original config's paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub engine: EngineConfig,
    pub description: String,
    pub notes: BTreeMap<String, String>,
    pub dataset: DatasetMeta,
    pub embedding: EmbeddingSettings,
    pub backend_id: String,
    pub strict: bool,
    pub max_inflight: usize,
    pub report: ReportSection,
    /// True when the run started from another run's library.
    pub seeded_library: bool,
}

impl Manifest {
    pub fn notes_list(&self) -> Vec<(String, String)> {
        self.notes.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub target: String,
    pub time_ordered: bool,
    pub time_column: Option<String>,
}

impl DatasetMeta {
    pub fn of(data: &Dataset) -> Self {
        DatasetMeta {
            name: data.name.clone(),
            target: data.target().to_string(),
            time_ordered: data.is_time_ordered(),
            time_column: data.time_column().map(str::to_string),
        }
    }
}

/// Progress numbers rewritten at every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: u64,
    pub generation: u64,
    pub offspring_total: u64,
    #[serde(with = "ext_real")]
    pub best_nmse: f64,
    pub best_id: Option<u64>,
    pub library_size: usize,
    pub operator_counts: BTreeMap<String, u64>,
    pub best_series: Vec<BestPoint>,
    pub valid_series: Vec<ValidPoint>,
}

impl Metrics {
    pub fn of(state: &RunState) -> Self {
        let names = ["pos_crossover", "neg_crossover", "pos_mutation", "neg_mutation"];
        Metrics {
            iteration: state.iteration,
            generation: state.generation,
            offspring_total: state.offspring_total,
            best_nmse: state.best_nmse(),
            best_id: state.best().map(|s| s.id),
            library_size: state.library.len(),
            operator_counts: names
                .iter()
                .zip(state.operator_counts)
                .map(|(n, c)| (n.to_string(), c))
                .collect(),
            best_series: state.best_series.clone(),
            valid_series: state.valid_series.clone(),
        }
    }
}

pub fn invalid_data(message: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, message.into())
}

/// Write to a sibling temp file, then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io(invalid_data(e.to_string())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::MissingRun(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Io(invalid_data(format!("{}: {e}", path.display()))))
}

pub fn solution_line(s: &Solution) -> String {
    serde_json::to_string(s).expect("solutions serialize")
}

pub fn state_json(state: &RunState) -> String {
    serde_json::to_string_pretty(state).expect("state serializes")
}

/// Cuts a line-oriented file back to its first `keep` lines; errors if the
/// file holds fewer.
pub fn truncate_lines(path: &Path, keep: u64) -> std::io::Result<String> {
    let text = if path.exists() { std::fs::read_to_string(path)? } else { String::new() };
    let mut end = 0;
    let mut kept = 0u64;
    for line in text.split_inclusive('\n') {
        if kept == keep {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        end += line.len();
        kept += 1;
    }
    if kept < keep {
        return Err(invalid_data(format!(
            "{} holds {kept} complete lines, checkpoint expects {keep}",
            path.display()
        )));
    }
    let kept_text = text[..end].to_string();
    if end != text.len() {
        atomic_write(path, kept_text.as_bytes())?;
    }
    Ok(kept_text)
}

/// Streams solutions to `solutions.jsonl` and checkpoints into the directory.
pub struct RunDirSink {
    dir: RunDir,
    solutions: BufWriter<File>,
}

impl RunDirSink {
    /// `append` keeps existing log lines (resume); otherwise the log starts empty.
    pub fn open(dir: RunDir, append: bool) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir.checkpoints())?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(dir.solutions())?;
        Ok(RunDirSink {
            dir,
            solutions: BufWriter::new(file),
        })
    }
}

impl RunSink for RunDirSink {
    fn solutions(&mut self, batch: &[Solution]) -> std::io::Result<()> {
        for s in batch {
            writeln!(self.solutions, "{}", solution_line(s))?;
        }
        self.solutions.flush()
    }

    fn checkpoint(&mut self, state: &RunState) -> std::io::Result<()> {
        let mut text = state_json(state);
        text.push('\n');
        atomic_write(&self.dir.checkpoint(), text.as_bytes())?;
        let numbered = self.dir.checkpoints().join(format!("gen-{:05}.json", state.generation));
        atomic_write(&numbered, text.as_bytes())?;
        let metrics = serde_json::to_string_pretty(&Metrics::of(state)).expect("metrics serialize");
        atomic_write(&self.dir.metrics(), format!("{metrics}\n").as_bytes())?;
        log::info!(
            "generation {} done: iteration {}, best NMSE {:e}, library {}",
            state.generation,
            state.iteration,
            state.best_nmse(),
            state.library.len()
        );
        Ok(())
    }
}

pub fn write_initial_library(dir: &RunDir, library: &KnowledgeLibrary) -> Result<(), RunError> {
    write_json(&dir.initial_library(), library)
}
