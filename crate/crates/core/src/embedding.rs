//! Text embeddings, cosine similarity, and the two clustering procedures:
//! threshold connectivity (library management) and DBSCAN (snapshots).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{HttpError, JsonClient, RetryPolicy};

pub const LOCAL_DIMS: usize = 256;
const LOCAL_HASH_SEED: u64 = 0xC0E0_0256;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding vector is zero or non-finite")]
    Degenerate,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    vector: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Embedding, EmbeddingError> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::Degenerate);
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::Degenerate);
        }
        Ok(Embedding { vector, norm })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dims(&self) -> usize {
        self.vector.len()
    }

    /// Normalized mean direction of several embeddings.
    pub fn centroid<'a>(items: impl IntoIterator<Item = &'a Embedding>) -> Option<Embedding> {
        let mut acc: Vec<f64> = Vec::new();
        for e in items {
            if acc.is_empty() {
                acc = vec![0.0; e.dims()];
            }
            if acc.len() != e.dims() {
                return None;
            }
            for (a, v) in acc.iter_mut().zip(&e.vector) {
                *a += v / e.norm;
            }
        }
        Embedding::new(acc).ok()
    }
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dims() != b.dims() {
        return Err(EmbeddingError::DimensionMismatch(a.dims(), b.dims()));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

/// Seeded FNV-1a, stable across platforms and releases.
pub fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ seed;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn local_bucket(token: &str) -> usize {
    (token_hash(token, LOCAL_HASH_SEED) % LOCAL_DIMS as u64) as usize
}

/// Feature-hashed bag of words, L2-normalized.
pub fn embed_local(text: &str) -> Result<Embedding, EmbeddingError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let mut counts = vec![0.0; LOCAL_DIMS];
    for t in &tokens {
        counts[local_bucket(t)] += 1.0;
    }
    let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
    counts.iter_mut().for_each(|v| *v /= norm);
    Embedding::new(counts)
}

pub enum Embedder {
    Local,
    Remote {
        client: JsonClient,
        url: String,
        model: String,
    },
}

impl Embedder {
    pub fn remote(base_url: &str, model: &str, api_key: Option<String>, policy: RetryPolicy) -> Result<Embedder, EmbeddingError> {
        let client = JsonClient::new(policy, api_key).map_err(|e| EmbeddingError::BackendUnavailable(e.to_string()))?;
        Ok(Embedder::Remote {
            client,
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
        })
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        match self {
            Embedder::Local => embed_local(text),
            Embedder::Remote { client, url, model } => {
                let reply = client
                    .post(url, &json!({"model": model, "input": text}))
                    .map_err(|e| match e {
                        HttpError::Unavailable { .. } | HttpError::Rejected(_) => {
                            EmbeddingError::BackendUnavailable(e.to_string())
                        }
                    })?;
                let vector: Vec<f64> = reply["data"][0]["embedding"]
                    .as_array()
                    .ok_or_else(|| EmbeddingError::BackendUnavailable("response has no data[0].embedding".into()))?
                    .iter()
                    .map(|v| v.as_f64().unwrap_or(f64::NAN))
                    .collect();
                Embedding::new(vector)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i64", try_from = "i64")]
pub enum Label {
    Cluster(usize),
    Noise,
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Cluster(c) => c as i64,
            Label::Noise => -1,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = String;
    fn try_from(v: i64) -> Result<Label, String> {
        match v {
            -1 => Ok(Label::Noise),
            c if c >= 0 => Ok(Label::Cluster(c as usize)),
            other => Err(format!("invalid cluster label {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ClusterMethod {
    Threshold { tau: f64 },
    Dbscan { eps: f64, min_pts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// One entry per input item, in input order.
    pub assignments: Vec<(u64, Label)>,
    pub method: ClusterMethod,
}

impl Clustering {
    pub fn empty(method: ClusterMethod) -> Self {
        Clustering {
            assignments: Vec::new(),
            method,
        }
    }

    pub fn cluster_count(&self) -> usize {
        self.assignments
            .iter()
            .filter_map(|(_, l)| match l {
                Label::Cluster(c) => Some(c + 1),
                Label::Noise => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn members(&self, cluster: usize) -> Vec<u64> {
        self.assignments
            .iter()
            .filter(|(_, l)| *l == Label::Cluster(cluster))
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn noise(&self) -> Vec<u64> {
        self.assignments
            .iter()
            .filter(|(_, l)| *l == Label::Noise)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn label_of(&self, id: u64) -> Option<Label> {
        self.assignments.iter().find(|(i, _)| *i == id).map(|(_, l)| *l)
    }

    /// Partition as sorted member lists (noise excluded), independent of labels.
    pub fn partition(&self) -> Vec<Vec<u64>> {
        let mut groups: Vec<Vec<u64>> = (0..self.cluster_count()).map(|c| self.members(c)).collect();
        groups.iter_mut().for_each(|g| g.sort_unstable());
        groups.sort();
        groups
    }
}

/// Renumbers raw group keys densely in order of first appearance.
fn dense_labels(ids: &[u64], raw: &[Option<usize>], method: ClusterMethod) -> Clustering {
    let mut remap: Vec<(usize, usize)> = Vec::new();
    let assignments = ids
        .iter()
        .zip(raw)
        .map(|(&id, r)| {
            let label = match r {
                None => Label::Noise,
                Some(key) => {
                    let next = remap.len();
                    let dense = match remap.iter().find(|(k, _)| k == key) {
                        Some((_, d)) => *d,
                        None => {
                            remap.push((*key, next));
                            next
                        }
                    };
                    Label::Cluster(dense)
                }
            };
            (id, label)
        })
        .collect();
    Clustering { assignments, method }
}

fn similarity_matrix(items: &[(u64, &Embedding)]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    let n = items.len();
    let mut sim = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(items[i].1, items[j].1)?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

/// Single-linkage clustering: items are connected when cosine ≥ `tau`;
/// clusters are the connected components.
pub fn cluster_threshold(items: &[(u64, &Embedding)], tau: f64) -> Result<Clustering, EmbeddingError> {
    let n = items.len();
    let sim = similarity_matrix(items)?;
    let mut component: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if component[start].is_some() {
            continue;
        }
        component[start] = Some(next);
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if component[j].is_none() && sim[i][j] >= tau {
                    component[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let ids: Vec<u64> = items.iter().map(|(id, _)| *id).collect();
    Ok(dense_labels(&ids, &component, ClusterMethod::Threshold { tau }))
}

/// DBSCAN over distance `1 - cosine`. A point is core when at least
/// `min_pts` points (itself included) lie within `eps`. Seeds expand in
/// ascending id order; a border point joins the cluster of its nearest core
/// neighbor (ties: lowest id), which makes the partition independent of
/// input order.
pub fn cluster_dbscan(items: &[(u64, &Embedding)], eps: f64, min_pts: usize) -> Result<Clustering, EmbeddingError> {
    let n = items.len();
    let sim = similarity_matrix(items)?;
    let dist = |i: usize, j: usize| 1.0 - sim[i][j];
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts.max(1)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| items[i].0);
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for &seed in &order {
        if label[seed].is_some() || !core[seed] {
            continue;
        }
        label[seed] = Some(next);
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            if !core[p] {
                continue;
            }
            let mut frontier = neighbors[p].clone();
            frontier.sort_by_key(|&q| items[q].0);
            for q in frontier {
                if label[q].is_none() {
                    label[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for p in 0..n {
        if core[p] || label[p].is_none() {
            continue;
        }
        let nearest = neighbors[p]
            .iter()
            .copied()
            .filter(|&q| core[q])
            .min_by(|&a, &b| dist(p, a).total_cmp(&dist(p, b)).then(items[a].0.cmp(&items[b].0)));
        label[p] = nearest.and_then(|q| label[q]);
    }
    let ids: Vec<u64> = items.iter().map(|(id, _)| *id).collect();
    Ok(dense_labels(&ids, &label, ClusterMethod::Dbscan { eps, min_pts }))
}
