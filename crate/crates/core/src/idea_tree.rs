//! One solution from a leveled tree of ideas: root ideas seeded with random
//! knowledge, refined level by level with similar knowledge and evaluator
//! feedback, then turned into full candidates.

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Embedding, EmbeddingError};
use crate::evaluation::Dataset;
use crate::knowledge::{summarize_improvement, KnowledgeLibrary, KnowledgePiece, SummaryContext};
use crate::llm::{extract_blocks, fenced_block, ChatRequest, Gateway, GatewayError, Message, Tag};
use crate::prompts::{render, PromptSet};
use crate::solution::{Evaluator, Lineage, Operator, Solution};

pub const GENERATION_TEMPERATURE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    /// Ideas per level; the last level is solved.
    pub widths: Vec<usize>,
    pub reuse_k: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    2048
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            widths: vec![3, 2],
            reuse_k: 2,
            max_tokens: default_max_tokens(),
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err("tree widths must be a non-empty list of positive integers".into());
        }
        if self.reuse_k == 0 {
            return Err("reuse_k must be at least 1".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Generation requests per call, summaries excluded.
    pub fn calls_per_tree(&self) -> usize {
        self.widths.iter().sum::<usize>() + self.widths[self.widths.len() - 1]
    }
}

/// Problem text plus the parents of the current operator.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub problem: String,
    pub variables: String,
    pub operator: Operator,
    pub parents: Vec<Solution>,
}

impl TaskContext {
    pub fn new(problem: &str, data: &Dataset, notes: &[(String, String)]) -> TaskContext {
        let mut lines: Vec<String> = data
            .feature_names()
            .iter()
            .map(|name| match notes.iter().find(|(n, _)| n == name) {
                Some((_, note)) => format!("- {name}: {note}"),
                None => format!("- {name}"),
            })
            .collect();
        let target = data.target();
        lines.push(match notes.iter().find(|(n, _)| n == target) {
            Some((_, note)) => format!("- {target} (target): {note}"),
            None => format!("- {target} (target)"),
        });
        TaskContext {
            problem: problem.to_string(),
            variables: lines.join("\n"),
            operator: Operator::Init,
            parents: Vec::new(),
        }
    }

    pub fn with_parents(&self, operator: Operator, parents: Vec<Solution>) -> TaskContext {
        TaskContext {
            operator,
            parents,
            ..self.clone()
        }
    }

    fn lineage(&self) -> Lineage {
        if self.operator == Operator::Init {
            Lineage::init()
        } else {
            Lineage::offspring(self.operator, self.parents.iter().map(|p| p.id).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeaNode {
    pub id: usize,
    pub level: usize,
    pub text: String,
    pub embedding: Option<Embedding>,
    pub parents: Vec<usize>,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdeaTree {
    pub nodes: Vec<IdeaNode>,
}

impl IdeaTree {
    pub fn level(&self, level: usize) -> Vec<&IdeaNode> {
        self.nodes.iter().filter(|n| n.level == level).collect()
    }
}

/// Shared, read-only inputs of a tree call.
pub struct TreeEnv<'a> {
    pub config: &'a TreeConfig,
    pub prompts: &'a PromptSet,
    pub embedder: &'a Embedder,
    pub evaluator: &'a Evaluator,
    /// Iteration counter stamped on new candidates and knowledge.
    pub iteration: u64,
}

#[derive(Debug, Clone)]
pub struct TreeOutcome {
    /// Best candidate by `Solution::compare`.
    pub solution: Solution,
    /// Every candidate materialized in this call, in creation order.
    pub candidates: Vec<Solution>,
    pub pieces: Vec<KnowledgePiece>,
    pub tree: IdeaTree,
}

/// Indices of level k-1 nodes feeding node `j` of a level with `width`
/// nodes: residues mod `width` when narrowing, wrap-around when widening.
pub fn round_robin_parents(j: usize, width: usize, prev_width: usize) -> Vec<usize> {
    if prev_width >= width {
        (0..prev_width).filter(|i| i % width == j).collect()
    } else {
        vec![j % prev_width]
    }
}

fn knowledge_block(pieces: &[KnowledgePiece]) -> String {
    if pieces.is_empty() {
        return "(none yet)".into();
    }
    pieces
        .iter()
        .map(|p| {
            if p.description.trim().is_empty() {
                format!("- {}", p.definition)
            } else {
                format!("- {}: {}", p.definition, p.description.trim())
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn parent_solutions_block(parents: &[Solution]) -> String {
    parents
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let expr = p
                .skeleton
                .as_ref()
                .map(|k| k.to_string())
                .unwrap_or_else(|| p.math_text.clone());
            let score = if p.valid {
                format!("{:.6e}", p.score)
            } else {
                "invalid".into()
            };
            let mut text = format!("Solution {}: {expr} (training NMSE {score})", i + 1);
            if !p.idea_text.trim().is_empty() {
                text.push_str(&format!("\n  Idea: {}", p.idea_text.trim()));
            }
            text
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn idea_text(response: &str) -> String {
    fenced_block(response, "idea").unwrap_or_else(|| response.trim().to_string())
}

fn embed(embedder: &Embedder, text: &str) -> Result<Option<Embedding>, GatewayError> {
    match embedder.embed(text) {
        Ok(e) => Ok(Some(e)),
        Err(EmbeddingError::BackendUnavailable(msg)) => Err(GatewayError::BackendUnavailable(msg)),
        Err(_) => Ok(None),
    }
}

struct Call<'a, 'g> {
    env: &'a TreeEnv<'a>,
    ctx: &'a TaskContext,
    gateway: &'g mut Gateway,
    next_id: &'g mut u64,
    lineage: Lineage,
    candidates: Vec<Solution>,
    pieces: Vec<KnowledgePiece>,
    /// Running baseline for improvement summaries.
    best: Option<Solution>,
}

impl Call<'_, '_> {
    fn request(&self, tag: Tag, prompt: String) -> ChatRequest {
        ChatRequest::new(
            tag,
            vec![Message::system(self.env.prompts.get("system")), Message::user(prompt)],
            GENERATION_TEMPERATURE,
            self.env.config.max_tokens,
        )
    }

    fn fresh_id(&mut self) -> u64 {
        let id = *self.next_id;
        *self.next_id += 1;
        id
    }

    /// Feedback on the best scored solution so far, parents included.
    fn feedback(&self) -> Option<String> {
        self.ctx
            .parents
            .iter()
            .filter(|p| p.valid)
            .chain(self.candidates.iter())
            .min_by(|a, b| a.compare(b))
            .map(|s| self.env.evaluator.feedback(s))
    }

    fn admit(&mut self, candidate: Solution) -> Result<(), GatewayError> {
        if candidate.valid {
            match &self.best {
                None => self.best = Some(candidate.clone()),
                Some(best) if candidate.score < best.score => {
                    let summary = SummaryContext {
                        prompts: self.env.prompts,
                        problem: &self.ctx.problem,
                        embedder: self.env.embedder,
                        iteration: self.env.iteration,
                    };
                    if let Some(piece) = summarize_improvement(best, &candidate, self.gateway, &summary)? {
                        self.pieces.push(piece);
                    }
                    self.best = Some(candidate.clone());
                }
                Some(_) => {}
            }
        }
        self.candidates.push(candidate);
        Ok(())
    }

    /// Turns idea-phase replies into nodes; replies that also carry a math
    /// block become candidates.
    fn ideas(
        &mut self,
        replies: Vec<Result<String, GatewayError>>,
        level: usize,
        parents: Vec<Vec<usize>>,
        feedback: Option<String>,
        tree: &mut IdeaTree,
    ) -> Result<(), GatewayError> {
        for (reply, parents) in replies.into_iter().zip(parents) {
            let text = match &reply {
                Ok(r) => idea_text(r),
                Err(_) => String::new(),
            };
            let embedding = if text.trim().is_empty() {
                None
            } else {
                embed(self.env.embedder, &text)?
            };
            tree.nodes.push(IdeaNode {
                id: tree.nodes.len(),
                level,
                text,
                embedding,
                parents,
                feedback: feedback.clone(),
            });
            if let Ok(r) = &reply {
                if let Ok(raw) = extract_blocks(r) {
                    let id = self.fresh_id();
                    let s = self.env.evaluator.materialize(&raw, id, self.lineage.clone(), self.env.iteration);
                    self.admit(s)?;
                }
            }
        }
        Ok(())
    }
}

pub fn generate_solution(
    ctx: &TaskContext,
    lib: &mut KnowledgeLibrary,
    env: &TreeEnv<'_>,
    gateway: &mut Gateway,
    next_id: &mut u64,
) -> Result<TreeOutcome, GatewayError> {
    env.config
        .validate()
        .map_err(GatewayError::InvalidRequest)?;
    let lineage = ctx.lineage();
    let best_parent = ctx
        .parents
        .iter()
        .filter(|p| p.valid)
        .min_by(|a, b| a.compare(b))
        .cloned();
    let mut call = Call {
        env,
        ctx,
        gateway,
        next_id,
        lineage,
        candidates: Vec::new(),
        pieces: Vec::new(),
        best: best_parent,
    };
    let mut tree = IdeaTree::default();
    let widths = &env.config.widths;

    // Inspiring.
    let knowledge = knowledge_block(&lib.reuse_random());
    let parent_text = parent_solutions_block(&ctx.parents);
    let parents_block = if ctx.operator == Operator::Init {
        env.prompts.get("init").to_string()
    } else {
        render(env.prompts.operator(ctx.operator), &[("parent_solutions", &parent_text)])
    };
    let inspire = render(
        env.prompts.get("inspire"),
        &[
            ("problem", &ctx.problem),
            ("variables", &ctx.variables),
            ("knowledge", &knowledge),
            ("parents", &parents_block),
        ],
    );
    let requests = (0..widths[0]).map(|_| call.request(Tag::Inspire, inspire.clone())).collect();
    let replies = call.gateway.complete_batch(requests)?;
    call.ideas(replies, 0, vec![Vec::new(); widths[0]], None, &mut tree)?;

    // Thinking.
    for level in 1..widths.len() {
        let feedback = call.feedback();
        let feedback_text = feedback.clone().unwrap_or_else(|| "(none yet)".into());
        let offset = tree.nodes.len() - widths[level - 1];
        let mut requests = Vec::with_capacity(widths[level]);
        let mut node_parents = Vec::with_capacity(widths[level]);
        for j in 0..widths[level] {
            let parents: Vec<usize> = round_robin_parents(j, widths[level], widths[level - 1])
                .into_iter()
                .map(|i| offset + i)
                .collect();
            let query = Embedding::centroid(parents.iter().filter_map(|&p| tree.nodes[p].embedding.as_ref()));
            let similar = match query {
                Some(q) => lib.reuse_similar(&q, env.config.reuse_k),
                None => Vec::new(),
            };
            let ideas = parents
                .iter()
                .enumerate()
                .map(|(n, &p)| format!("Idea {}: {}", n + 1, tree.nodes[p].text))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = render(
                env.prompts.get("think"),
                &[
                    ("problem", &ctx.problem),
                    ("variables", &ctx.variables),
                    ("knowledge", &knowledge_block(&similar)),
                    ("parents", &ideas),
                    ("feedback", &feedback_text),
                ],
            );
            requests.push(call.request(Tag::Think, prompt));
            node_parents.push(parents);
        }
        let replies = call.gateway.complete_batch(requests)?;
        call.ideas(replies, level, node_parents, feedback, &mut tree)?;
    }

    // Solving.
    let feedback_text = call.feedback().unwrap_or_else(|| "(none yet)".into());
    let last = widths.len() - 1;
    let final_nodes: Vec<usize> = tree.level(last).iter().map(|n| n.id).collect();
    let contract = env.prompts.get("format_contract");
    let requests = final_nodes
        .iter()
        .map(|&n| {
            let prompt = render(
                env.prompts.get("solve"),
                &[
                    ("problem", &ctx.problem),
                    ("variables", &ctx.variables),
                    ("parents", &tree.nodes[n].text),
                    ("feedback", &feedback_text),
                    ("format_contract", contract),
                ],
            );
            call.request(Tag::Solve, prompt)
        })
        .collect();
    let replies = call.gateway.complete_batch(requests)?;
    for reply in replies {
        let id = call.fresh_id();
        let lineage = call.lineage.clone();
        let s = match reply {
            Ok(text) => env.evaluator.materialize_response(&text, id, lineage, env.iteration),
            Err(e) => Solution::rejected(id, String::new(), format!("ResponseRejected: {e}"), lineage, env.iteration),
        };
        call.admit(s)?;
    }

    let solution = call
        .candidates
        .iter()
        .min_by(|a, b| a.compare(b))
        .cloned()
        .expect("solving yields at least one candidate");
    Ok(TreeOutcome {
        solution,
        candidates: call.candidates,
        pieces: call.pieces,
        tree,
    })
}
