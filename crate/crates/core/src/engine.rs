//! The outer evolutionary loop.
//!
//! `iteration` counts sampled solutions: each initialization call and each
//! accepted offspring advances it by one, and `best_series` gains one point
//! per sample.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedder;
use crate::fit::FitBudget;
use crate::idea_tree::{generate_solution, TaskContext, TreeConfig, TreeEnv, TreeOutcome};
use crate::knowledge::{KnowledgeLibrary, KnowledgePiece, LibraryConfig};
use crate::llm::{BackendCursor, Gateway, GatewayError};
use crate::prompts::PromptSet;
use crate::rng::SeedStream;
use crate::solution::{ext_real, Evaluator, Operator, Solution};

pub const STATE_VERSION: u32 = 1;

const OPERATOR_SALT: u64 = 0x0_9E7A;
const SELECTION_SALT: u64 = 0x5E1E;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorMix {
    pub pos_crossover: f64,
    pub neg_crossover: f64,
    pub pos_mutation: f64,
    pub neg_mutation: f64,
}

impl Default for OperatorMix {
    fn default() -> Self {
        OperatorMix {
            pos_crossover: 0.35,
            neg_crossover: 0.15,
            pos_mutation: 0.35,
            neg_mutation: 0.15,
        }
    }
}

impl OperatorMix {
    pub fn only(op: Operator) -> Self {
        let mut mix = OperatorMix {
            pos_crossover: 0.0,
            neg_crossover: 0.0,
            pos_mutation: 0.0,
            neg_mutation: 0.0,
        };
        match op {
            Operator::PosCrossover => mix.pos_crossover = 1.0,
            Operator::NegCrossover => mix.neg_crossover = 1.0,
            Operator::PosMutation => mix.pos_mutation = 1.0,
            Operator::NegMutation | Operator::Init => mix.neg_mutation = 1.0,
        }
        mix
    }

    pub fn weights(&self) -> [(Operator, f64); 4] {
        [
            (Operator::PosCrossover, self.pos_crossover),
            (Operator::NegCrossover, self.neg_crossover),
            (Operator::PosMutation, self.pos_mutation),
            (Operator::NegMutation, self.neg_mutation),
        ]
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn draw(&self, rng: &mut impl Rng) -> Operator {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let weights = self.weights();
        for (op, w) in weights {
            acc += w;
            if u < acc {
                return op;
            }
        }
        weights
            .iter()
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(op, _)| *op)
            .expect("mix has positive mass")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub population_size: usize,
    pub generations: usize,
    pub samples_per_generation: usize,
    pub operator_mix: OperatorMix,
    pub seed: u64,
    pub tree: TreeConfig,
    pub fit: FitBudget,
    pub library: LibraryConfig,
    /// Insert knowledge after every offspring instead of at generation end.
    pub immediate_knowledge: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            population_size: 10,
            generations: 100,
            samples_per_generation: 20,
            operator_mix: OperatorMix::default(),
            seed: 0,
            tree: TreeConfig::default(),
            fit: FitBudget::default(),
            library: LibraryConfig::default(),
            immediate_knowledge: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        let w = self.operator_mix.weights();
        if w.iter().any(|(_, p)| !p.is_finite() || *p < 0.0) {
            return Err("operator_mix probabilities must be non-negative".into());
        }
        let total: f64 = w.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("operator_mix must sum to 1, got {total}"));
        }
        if self.population_size == 0 {
            return Err("population_size must be at least 1".into());
        }
        let crossover = self.operator_mix.pos_crossover + self.operator_mix.neg_crossover;
        if crossover > 0.0 && self.population_size < 2 {
            return Err("crossover needs population_size >= 2".into());
        }
        if self.library.capacity == 0 {
            return Err("library capacity must be at least 1".into());
        }
        if self.fit.max_evals == 0 {
            return Err("fit.max_evals must be positive".into());
        }
        self.tree.validate()
    }

    pub fn offspring_budget(&self) -> usize {
        self.generations * self.samples_per_generation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub iteration: u64,
    #[serde(with = "ext_real")]
    pub best_nmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidPoint {
    pub generation: u64,
    pub valid: u64,
    pub samples: u64,
    pub valid_ratio: f64,
}

/// Everything needed to continue a run. Unknown fields are ignored on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    pub population: Vec<Solution>,
    pub library: KnowledgeLibrary,
    pub iteration: u64,
    /// Completed generations.
    pub generation: u64,
    pub offspring_total: u64,
    pub next_solution_id: u64,
    pub best_series: Vec<BestPoint>,
    pub valid_series: Vec<ValidPoint>,
    pub operator_counts: [u64; 4],
    pub operator_rng: SeedStream,
    pub selection_rng: SeedStream,
    #[serde(default)]
    pub backend_cursor: BackendCursor,
    #[serde(default)]
    pub transcript_len: u64,
    #[serde(default)]
    pub solutions_logged: u64,
}

impl RunState {
    pub fn best(&self) -> Option<&Solution> {
        self.population.first()
    }

    pub fn best_nmse(&self) -> f64 {
        self.best_series.last().map_or(f64::INFINITY, |p| p.best_nmse)
    }

    fn record_sample(&mut self, score: f64) {
        self.iteration += 1;
        let best = self.best_nmse().min(score);
        self.best_series.push(BestPoint {
            iteration: self.iteration,
            best_nmse: best,
        });
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("run output: {0}")]
    Sink(#[from] std::io::Error),
    #[error("invalid engine config: {0}")]
    Config(String),
}

/// Receives committed results: every materialized candidate, then a
/// checkpoint, once per initialization and per generation.
pub trait RunSink {
    fn solutions(&mut self, batch: &[Solution]) -> std::io::Result<()>;
    fn checkpoint(&mut self, state: &RunState) -> std::io::Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub log: Vec<Solution>,
    pub checkpoints: Vec<RunState>,
}

impl RunSink for MemorySink {
    fn solutions(&mut self, batch: &[Solution]) -> std::io::Result<()> {
        self.log.extend_from_slice(batch);
        Ok(())
    }

    fn checkpoint(&mut self, state: &RunState) -> std::io::Result<()> {
        self.checkpoints.push(state.clone());
        Ok(())
    }
}

pub struct Engine<'a> {
    pub config: &'a EngineConfig,
    pub evaluator: Evaluator,
    pub prompts: &'a PromptSet,
    pub embedder: &'a Embedder,
    pub context: TaskContext,
}

fn operator_index(op: Operator) -> usize {
    match op {
        Operator::PosCrossover => 0,
        Operator::NegCrossover => 1,
        Operator::PosMutation => 2,
        Operator::NegMutation | Operator::Init => 3,
    }
}

/// Binary tournament: two uniform draws (with replacement) from `pool`,
/// the better by `compare` wins. Returns an index into `pool`.
pub fn tournament(pool: &[&Solution], rng: &mut impl Rng) -> usize {
    let a = rng.gen_range(0..pool.len());
    let b = rng.gen_range(0..pool.len());
    if pool[b].compare(pool[a]) == Ordering::Less {
        b
    } else {
        a
    }
}

impl Engine<'_> {
    fn tree_call(
        &self,
        ctx: &TaskContext,
        state: &mut RunState,
        gateway: &mut Gateway,
    ) -> Result<TreeOutcome, GatewayError> {
        let env = TreeEnv {
            config: &self.config.tree,
            prompts: self.prompts,
            embedder: self.embedder,
            evaluator: &self.evaluator,
            iteration: state.iteration,
        };
        generate_solution(ctx, &mut state.library, &env, gateway, &mut state.next_solution_id)
    }

    fn commit(
        &self,
        state: &mut RunState,
        next: RunState,
        log: Vec<Solution>,
        gateway: &Gateway,
        sink: &mut dyn RunSink,
    ) -> Result<(), EngineError> {
        *state = next;
        state.solutions_logged += log.len() as u64;
        state.transcript_len = gateway.transcript().len() as u64;
        state.backend_cursor = gateway.cursor();
        sink.solutions(&log)?;
        sink.checkpoint(state)?;
        Ok(())
    }

    fn insert_all(library: &mut KnowledgeLibrary, pieces: Vec<KnowledgePiece>) {
        for piece in pieces {
            library.insert(piece);
        }
    }

    /// `N` independent, parent-free tree calls. A non-empty `library` seeds
    /// the inspiring phase (continual mode).
    pub fn initialize(
        &self,
        library: KnowledgeLibrary,
        gateway: &mut Gateway,
        sink: &mut dyn RunSink,
    ) -> Result<RunState, EngineError> {
        self.config.validate().map_err(EngineError::Config)?;
        let seed = self.config.seed;
        let mut state = RunState {
            version: STATE_VERSION,
            population: Vec::new(),
            library,
            iteration: 0,
            generation: 0,
            offspring_total: 0,
            next_solution_id: 0,
            best_series: Vec::new(),
            valid_series: Vec::new(),
            operator_counts: [0; 4],
            operator_rng: SeedStream::new(seed, OPERATOR_SALT),
            selection_rng: SeedStream::new(seed, SELECTION_SALT),
            backend_cursor: BackendCursor::default(),
            transcript_len: 0,
            solutions_logged: 0,
        };
        let mut next = state.clone();
        let mut log = Vec::new();
        let mut pending = Vec::new();
        let ctx = self.context.with_parents(Operator::Init, Vec::new());
        for _ in 0..self.config.population_size {
            let outcome = self.tree_call(&ctx, &mut next, gateway)?;
            log.extend(outcome.candidates);
            if self.config.immediate_knowledge {
                Self::insert_all(&mut next.library, outcome.pieces);
            } else {
                pending.extend(outcome.pieces);
            }
            next.record_sample(outcome.solution.score);
            next.population.push(outcome.solution);
        }
        Self::insert_all(&mut next.library, pending);
        next.population.sort_by(|a, b| a.compare(b));
        self.commit(&mut state, next, log, gateway, sink)?;
        Ok(state)
    }

    fn select_parents(&self, op: Operator, state: &mut RunState) -> Vec<Solution> {
        let mut rng = state.selection_rng.next_rng();
        let pool: Vec<&Solution> = state.population.iter().collect();
        let first = tournament(&pool, &mut rng);
        if op.parent_count() == 1 {
            return vec![pool[first].clone()];
        }
        let rest: Vec<&Solution> = pool
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != first)
            .map(|(_, s)| *s)
            .collect();
        let second = tournament(&rest, &mut rng);
        vec![pool[first].clone(), rest[second].clone()]
    }

    /// One generation of offspring followed by the top-N update. On a
    /// backend failure `state` is left as it was before the call.
    pub fn step_generation(
        &self,
        state: &mut RunState,
        gateway: &mut Gateway,
        sink: &mut dyn RunSink,
    ) -> Result<(), EngineError> {
        let mut next = state.clone();
        let mut log = Vec::new();
        let mut pending = Vec::new();
        let mut offspring = Vec::with_capacity(self.config.samples_per_generation);
        for _ in 0..self.config.samples_per_generation {
            let op = self.config.operator_mix.draw(&mut next.operator_rng.next_rng());
            next.operator_counts[operator_index(op)] += 1;
            let parents = self.select_parents(op, &mut next);
            let ctx = self.context.with_parents(op, parents);
            let mut outcome = self.tree_call(&ctx, &mut next, gateway)?;
            let duplicate = |s: &Solution| {
                let text = s.math_text.trim();
                !text.is_empty() && next.population.iter().any(|p| p.math_text.trim() == text)
            };
            if duplicate(&outcome.solution) {
                let discarded = std::mem::replace(&mut outcome, self.tree_call(&ctx, &mut next, gateway)?);
                log.extend(discarded.candidates);
                pending.extend(discarded.pieces);
            }
            log.extend(outcome.candidates);
            if self.config.immediate_knowledge {
                Self::insert_all(&mut next.library, std::mem::take(&mut pending));
                Self::insert_all(&mut next.library, outcome.pieces);
            } else {
                pending.extend(outcome.pieces);
            }
            next.record_sample(outcome.solution.score);
            next.offspring_total += 1;
            offspring.push(outcome.solution);
        }
        Self::insert_all(&mut next.library, pending);

        let valid = offspring.iter().filter(|s| s.valid).count() as u64;
        let samples = offspring.len() as u64;
        next.population.extend(offspring);
        next.population.sort_by(|a, b| a.compare(b));
        next.population.truncate(self.config.population_size);
        next.generation += 1;
        next.valid_series.push(ValidPoint {
            generation: next.generation,
            valid,
            samples,
            valid_ratio: if samples == 0 { 0.0 } else { valid as f64 / samples as f64 },
        });
        self.commit(state, next, log, gateway, sink)
    }

    /// Generations until the configured count is reached. Works on a fresh
    /// or a resumed state.
    pub fn continue_run(
        &self,
        mut state: RunState,
        gateway: &mut Gateway,
        sink: &mut dyn RunSink,
    ) -> Result<RunState, EngineError> {
        while (state.generation as usize) < self.config.generations {
            self.step_generation(&mut state, gateway, sink)?;
        }
        Ok(state)
    }

    pub fn run(
        &self,
        library: KnowledgeLibrary,
        gateway: &mut Gateway,
        sink: &mut dyn RunSink,
    ) -> Result<RunState, EngineError> {
        let state = self.initialize(library, gateway, sink)?;
        self.continue_run(state, gateway, sink)
    }
}
