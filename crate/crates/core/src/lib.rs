//! Profile diagnosis and treatment for LLM-based user simulators, plus a
//! simulator-recommender arena.

pub mod arena;
pub mod backend;
pub mod catalog;
pub mod config;
pub mod defects;
pub mod corpus;
pub mod diagnosis;
pub mod error;
pub mod orchestrator;
pub mod pipeline;
pub mod profile;
pub mod prompts;
pub mod recsys;
pub mod report;
pub mod seed;
pub mod simulator;
pub mod store;
pub mod treatment;

pub use error::{Error, Result};
