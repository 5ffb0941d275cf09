//! Open-set, dynamically generated benchmark for object-existence
//! hallucination in multimodal models.
//!
//! The workflow has four stages that map onto the modules below:
//!
//! 1. [`graph`] builds a weighted co-occurrence graph over entity and
//!    environment concepts from annotated scene records.
//! 2. [`sampler`] draws concept pairs from that graph under one of four
//!    criteria (common, long-tail, random, fictional).
//! 3. [`pipeline`] turns each pair into a text-to-image prompt
//!    ([`prompts`]), calls the external generator and open-vocabulary
//!    detector ([`services`]), filters images that lack the expected
//!    concepts and persists accepted test cases ([`store`]).
//! 4. [`evaluator`] queries the model under test, [`metrics`] scores the
//!    answers and [`analysis`] looks for hallucination tendencies.

pub mod analysis;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod hashing;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod sampler;
pub mod services;
pub mod store;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Concept, ConceptGraph, Level, SceneRecord};
pub use prompts::{GroundTruth, ImagePromptSpec, Question, QuestionKind, Style, Templates};
pub use sampler::{ConceptPair, Criterion};

/// Version string recorded in run manifests.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));
