//! The knowledge library: improvement summaries stored with embeddings,
//! deduplicated, capped by cluster-aware eviction, and served back by random
//! per-cluster or similarity-based reuse.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{cluster_dbscan, cluster_threshold, cosine, Clustering, ClusterMethod, Embedder, Embedding, EmbeddingError, Label};
use crate::llm::{fenced_block, ChatRequest, Gateway, GatewayError, Message, Tag};
use crate::prompts::{render, PromptSet};
use crate::rng::SeedStream;
use crate::solution::Solution;

pub const MAX_DEFINITION_CHARS: usize = 200;
pub const MAX_DESCRIPTION_CHARS: usize = 2000;
pub const SUMMARY_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSource {
    pub solution_id: u64,
    pub iteration: u64,
    pub score_before: f64,
    pub score_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePiece {
    /// Assigned by the library on insertion.
    pub id: u64,
    pub definition: String,
    pub description: String,
    pub embedding: Embedding,
    pub source: KnowledgeSource,
    pub uses: u64,
}

impl KnowledgePiece {
    pub fn improvement(&self) -> f64 {
        self.source.score_before - self.source.score_after
    }

    pub fn embedding_text(definition: &str, description: &str) -> String {
        format!("{definition}\n{description}")
    }

    fn check(&self) -> Result<(), String> {
        let s = &self.source;
        if !(s.score_before.is_finite() && s.score_after.is_finite() && s.score_after < s.score_before) {
            return Err(format!(
                "scores must improve strictly: before {} after {}",
                s.score_before, s.score_after
            ));
        }
        if self.definition.trim().is_empty() || self.definition.chars().count() > MAX_DEFINITION_CHARS {
            return Err("definition must be non-empty and at most 200 characters".into());
        }
        if self.description.chars().count() > MAX_DESCRIPTION_CHARS {
            return Err("description exceeds 2000 characters".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibraryConfig {
    pub capacity: usize,
    /// Cosine threshold for management clustering.
    pub tau: f64,
    /// Cosine at or above which a new piece merges with an existing one.
    pub dedup: f64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig {
            capacity: 30,
            tau: 0.85,
            dedup: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Admission {
    Appended { id: u64 },
    /// `kept` survives; `dropped` is the id that disappeared (for a winning
    /// newcomer this is the replaced piece).
    Merged { kept: u64, dropped: u64 },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionReport {
    pub admission: Admission,
    pub evicted: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeLibrary {
    config: LibraryConfig,
    pieces: Vec<KnowledgePiece>,
    clustering: Clustering,
    next_id: u64,
    rng: SeedStream,
}

const REUSE_SALT: u64 = 0x4B4E_4F57;

impl KnowledgeLibrary {
    pub fn new(config: LibraryConfig, seed: u64) -> Self {
        KnowledgeLibrary {
            clustering: Clustering::empty(ClusterMethod::Threshold { tau: config.tau }),
            config,
            pieces: Vec::new(),
            next_id: 0,
            rng: SeedStream::new(seed, REUSE_SALT),
        }
    }

    pub fn config(&self) -> &LibraryConfig {
        &self.config
    }

    pub fn pieces(&self) -> &[KnowledgePiece] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn get(&self, id: u64) -> Option<&KnowledgePiece> {
        self.pieces.iter().find(|p| p.id == id)
    }

    fn similarity(a: &Embedding, b: &Embedding) -> f64 {
        cosine(a, b).unwrap_or(-1.0)
    }

    pub fn insert(&mut self, mut piece: KnowledgePiece) -> AdmissionReport {
        let rejected = |reason: String| AdmissionReport {
            admission: Admission::Rejected { reason },
            evicted: Vec::new(),
        };
        if let Err(reason) = piece.check() {
            return rejected(reason);
        }
        if let Some(first) = self.pieces.first() {
            if first.embedding.dims() != piece.embedding.dims() {
                return rejected(format!(
                    "embedding has {} dimensions, library uses {}",
                    piece.embedding.dims(),
                    first.embedding.dims()
                ));
            }
        }
        piece.id = self.next_id;
        self.next_id += 1;

        let closest = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (i, Self::similarity(&p.embedding, &piece.embedding)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let admission = match closest {
            Some((idx, sim)) if sim >= self.config.dedup => {
                let existing = &mut self.pieces[idx];
                let uses = existing.uses + piece.uses;
                if piece.improvement() > existing.improvement() {
                    let dropped = existing.id;
                    piece.uses = uses;
                    let kept = piece.id;
                    *existing = piece;
                    Admission::Merged { kept, dropped }
                } else {
                    existing.uses = uses;
                    Admission::Merged {
                        kept: existing.id,
                        dropped: piece.id,
                    }
                }
            }
            _ => {
                let id = piece.id;
                self.pieces.push(piece);
                Admission::Appended { id }
            }
        };

        self.recluster();
        let mut evicted = Vec::new();
        while self.pieces.len() > self.config.capacity {
            let victim = self.eviction_candidate().expect("over capacity implies pieces");
            self.pieces.retain(|p| p.id != victim);
            evicted.push(victim);
            self.recluster();
        }
        AdmissionReport { admission, evicted }
    }

    /// Smallest improvement (ties: oldest) within the largest cluster (ties:
    /// lowest cluster label).
    fn eviction_candidate(&self) -> Option<u64> {
        let count = self.clustering.cluster_count();
        let largest = (0..count).max_by(|&a, &b| {
            self.clustering
                .members(a)
                .len()
                .cmp(&self.clustering.members(b).len())
                .then(b.cmp(&a))
        })?;
        self.clustering
            .members(largest)
            .into_iter()
            .filter_map(|id| self.get(id))
            .min_by(|a, b| a.improvement().total_cmp(&b.improvement()).then(a.id.cmp(&b.id)))
            .map(|p| p.id)
    }

    fn recluster(&mut self) {
        let items: Vec<(u64, &Embedding)> = self.pieces.iter().map(|p| (p.id, &p.embedding)).collect();
        self.clustering = cluster_threshold(&items, self.config.tau)
            .expect("library embeddings share one dimension");
    }

    fn bump(&mut self, ids: &[u64]) -> Vec<KnowledgePiece> {
        ids.iter()
            .filter_map(|id| {
                let p = self.pieces.iter_mut().find(|p| p.id == *id)?;
                p.uses += 1;
                Some(p.clone())
            })
            .collect()
    }

    /// One uniformly chosen piece per cluster, in shuffled order.
    pub fn reuse_random(&mut self) -> Vec<KnowledgePiece> {
        if self.pieces.is_empty() {
            return Vec::new();
        }
        let mut rng = self.rng.next_rng();
        let mut picks: Vec<u64> = (0..self.clustering.cluster_count())
            .map(|c| {
                let members = self.clustering.members(c);
                members[rng.gen_range(0..members.len())]
            })
            .collect();
        picks.shuffle(&mut rng);
        self.bump(&picks)
    }

    /// Exhaustive top-k by cosine to `query`, ties by id.
    pub fn reuse_similar(&mut self, query: &Embedding, k: usize) -> Vec<KnowledgePiece> {
        let mut ranked: Vec<(u64, f64)> = self
            .pieces
            .iter()
            .map(|p| (p.id, Self::similarity(&p.embedding, query)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let ids: Vec<u64> = ranked.into_iter().take(k.max(1)).map(|(id, _)| id).collect();
        self.bump(&ids)
    }

    pub fn snapshot(&self, eps: f64, min_pts: usize) -> KnowledgeSnapshot {
        let items: Vec<(u64, &Embedding)> = self.pieces.iter().map(|p| (p.id, &p.embedding)).collect();
        let clustering = cluster_dbscan(&items, eps, min_pts).expect("library embeddings share one dimension");
        let records = self
            .pieces
            .iter()
            .map(|p| SnapshotRecord {
                id: p.id,
                definition: p.definition.clone(),
                label: clustering.label_of(p.id).unwrap_or(Label::Noise),
                improvement: p.improvement(),
                score_before: p.source.score_before,
                score_after: p.source.score_after,
                solution_id: p.source.solution_id,
                iteration: p.source.iteration,
                uses: p.uses,
            })
            .collect();
        KnowledgeSnapshot { clustering, records }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub id: u64,
    pub definition: String,
    pub label: Label,
    pub improvement: f64,
    pub score_before: f64,
    pub score_after: f64,
    pub solution_id: u64,
    pub iteration: u64,
    pub uses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSnapshot {
    pub clustering: Clustering,
    pub records: Vec<SnapshotRecord>,
}

/// What summarization needs besides the two solutions.
pub struct SummaryContext<'a> {
    pub prompts: &'a PromptSet,
    pub problem: &'a str,
    pub embedder: &'a Embedder,
    pub iteration: u64,
}

fn describe(s: &Solution) -> String {
    let expr = s
        .skeleton
        .as_ref()
        .map(|k| k.to_string())
        .unwrap_or_else(|| s.math_text.clone());
    if s.idea_text.trim().is_empty() {
        format!("Expression: {expr}")
    } else {
        format!("Idea: {}\nExpression: {expr}", s.idea_text.trim())
    }
}

/// Asks the backend to distill why `child` beat `parent`. Returns `None` when
/// the child is not a strict improvement or the reply cannot be parsed.
pub fn summarize_improvement(
    parent: &Solution,
    child: &Solution,
    gateway: &mut Gateway,
    ctx: &SummaryContext<'_>,
) -> Result<Option<KnowledgePiece>, GatewayError> {
    if !child.valid || child.score.partial_cmp(&parent.score) != Some(std::cmp::Ordering::Less) || !parent.score.is_finite() {
        return Ok(None);
    }
    let before = describe(parent);
    let after = describe(child);
    let before_score = format!("{:.6e}", parent.score);
    let after_score = format!("{:.6e}", child.score);
    let prompt = render(
        ctx.prompts.get("summarize"),
        &[
            ("problem", ctx.problem),
            ("before", &before),
            ("after", &after),
            ("before_score", &before_score),
            ("after_score", &after_score),
        ],
    );
    let request = ChatRequest::new(
        Tag::Summarize,
        vec![Message::system(ctx.prompts.get("system")), Message::user(prompt)],
        SUMMARY_TEMPERATURE,
        1024,
    );
    let reply = match gateway.complete(request) {
        Ok(text) => text,
        Err(e) if !e.is_fatal() => return Ok(None),
        Err(e) => return Err(e),
    };
    let Some(definition) = fenced_block(&reply, "definition") else {
        return Ok(None);
    };
    let definition = definition.trim().to_string();
    if definition.is_empty() || definition.chars().count() > MAX_DEFINITION_CHARS {
        return Ok(None);
    }
    let description: String = fenced_block(&reply, "description")
        .unwrap_or_default()
        .chars()
        .take(MAX_DESCRIPTION_CHARS)
        .collect();
    let embedding = match ctx
        .embedder
        .embed(&KnowledgePiece::embedding_text(&definition, &description))
    {
        Ok(e) => e,
        Err(EmbeddingError::BackendUnavailable(msg)) => return Err(GatewayError::BackendUnavailable(msg)),
        Err(_) => return Ok(None),
    };
    Ok(Some(KnowledgePiece {
        id: 0,
        definition,
        description,
        embedding,
        source: KnowledgeSource {
            solution_id: child.id,
            iteration: ctx.iteration,
            score_before: parent.score,
            score_after: child.score,
        },
        uses: 0,
    }))
}
