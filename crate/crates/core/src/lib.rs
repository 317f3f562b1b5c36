//! Merge-of-thought distillation at desk scale.
//!
//! Synthetic teachers write chain-of-thought traces for modular arithmetic
//! problems; a tiny transformer student is fine-tuned on each teacher's
//! answer-filtered corpus, and the per-teacher branches are averaged in weight
//! space after every round.

pub mod answer;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod merge;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod store;
pub mod task;
pub mod teacher;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
