//! Continual evolutionary search for symbolic solutions.
//!
//! A language-model backend proposes candidates through a three-phase idea
//! tree; candidates are parsed, constant-fitted and scored by NMSE; strict
//! improvements are distilled into a capacity-bounded, clustered knowledge
//! library that feeds later generations.

pub mod evaluation;
pub mod expr;
pub mod fit;
pub mod rng;
pub mod embedding;
pub mod http;
pub mod llm;
pub mod solution;
pub mod prompts;
pub mod knowledge;
pub mod idea_tree;
pub mod engine;
pub mod run;
