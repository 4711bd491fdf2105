//! Plottable series and a summary record, derived from a run directory alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::store::{atomic_write, write_json, RunDir};
use super::RunError;
use crate::engine::RunState;
use crate::evaluation::{score_solution, Dataset};
use crate::knowledge::KnowledgeSnapshot;
use crate::solution::ext_real;

pub const BEST_SERIES_CSV: &str = "best_nmse_by_iteration.csv";
pub const VALID_SERIES_CSV: &str = "valid_ratio_by_generation.csv";
pub const KNOWLEDGE_CSV: &str = "knowledge_snapshot.csv";
pub const KNOWLEDGE_JSON: &str = "knowledge_snapshot.json";
pub const SUMMARY_JSON: &str = "summary.json";

/// Final numbers for the best solution, one row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub backend_id: String,
    pub generations: u64,
    pub iterations: u64,
    pub offspring_total: u64,
    pub best_id: Option<u64>,
    pub best_expression: Option<String>,
    pub best_params: Option<Vec<f64>>,
    #[serde(with = "ext_real::option")]
    pub best_score: Option<f64>,
    #[serde(with = "ext_real::option")]
    pub id_nmse: Option<f64>,
    #[serde(with = "ext_real::option")]
    pub ood_nmse: Option<f64>,
    pub library_size: usize,
    pub library_clusters: usize,
}

pub fn summarize(state: &RunState, data: &Dataset, backend_id: &str, snapshot: &KnowledgeSnapshot) -> Summary {
    let best = state.best();
    let fitted = best.and_then(|b| b.fitted.as_ref());
    let scores = fitted.and_then(|m| score_solution(m, data).ok());
    Summary {
        problem: data.name.clone(),
        backend_id: backend_id.to_string(),
        generations: state.generation,
        iterations: state.iteration,
        offspring_total: state.offspring_total,
        best_id: best.map(|b| b.id),
        best_expression: fitted.map(|m| m.skeleton.to_string()),
        best_params: fitted.map(|m| m.params.clone()),
        best_score: best.map(|b| b.score),
        id_nmse: scores.map(|s| s.id_nmse),
        ood_nmse: scores.and_then(|s| s.ood_nmse),
        library_size: state.library.len(),
        library_clusters: snapshot.clustering.cluster_count(),
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the report into `<run>/report/` and returns the file paths.
pub fn write_report(dir: &RunDir) -> Result<Vec<PathBuf>, RunError> {
    dir.require_run()?;
    let manifest = dir.read_manifest()?;
    let state = dir.read_checkpoint()?;
    let data = dir.read_dataset(&manifest.dataset)?;
    let out = dir.report();
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();

    let best = csv_bytes(
        &["iteration", "best_nmse"],
        state
            .best_series
            .iter()
            .map(|p| vec![p.iteration.to_string(), real(p.best_nmse)]),
    )?;
    written.push(out.join(BEST_SERIES_CSV));
    atomic_write(&out.join(BEST_SERIES_CSV), &best)?;

    let valid = csv_bytes(
        &["generation", "valid", "samples", "valid_ratio"],
        state.valid_series.iter().map(|p| {
            vec![
                p.generation.to_string(),
                p.valid.to_string(),
                p.samples.to_string(),
                real(p.valid_ratio),
            ]
        }),
    )?;
    written.push(out.join(VALID_SERIES_CSV));
    atomic_write(&out.join(VALID_SERIES_CSV), &valid)?;

    let snapshot = state.library.snapshot(manifest.report.eps, manifest.report.min_pts);
    let knowledge = csv_bytes(
        &[
            "id",
            "definition",
            "cluster",
            "improvement",
            "score_before",
            "score_after",
            "solution_id",
            "iteration",
            "uses",
        ],
        snapshot.records.iter().map(|r| {
            vec![
                r.id.to_string(),
                r.definition.clone(),
                i64::from(r.label).to_string(),
                real(r.improvement),
                real(r.score_before),
                real(r.score_after),
                r.solution_id.to_string(),
                r.iteration.to_string(),
                r.uses.to_string(),
            ]
        }),
    )?;
    written.push(out.join(KNOWLEDGE_CSV));
    atomic_write(&out.join(KNOWLEDGE_CSV), &knowledge)?;
    written.push(out.join(KNOWLEDGE_JSON));
    write_json(&out.join(KNOWLEDGE_JSON), &snapshot)?;

    let summary = summarize(&state, &data, &manifest.backend_id, &snapshot);
    written.push(out.join(SUMMARY_JSON));
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    Ok(written)
}
