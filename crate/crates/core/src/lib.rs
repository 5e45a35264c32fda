//! Coverage-guided test generation with a chat LLM.
//!
//! The pipeline measures coverage of an existing suite, splits uncovered code
//! into segments, prompts the model for a test per segment, executes and
//! re-measures each candidate, continues the chat when a candidate fails or
//! adds no coverage, and finally checks the whole suite for tests that break
//! each other.

pub mod adapter;
pub mod cli;
pub mod coverage;
pub mod engine;
pub mod gateway;
pub mod integrator;
pub mod outline;
pub mod prompt;
pub mod report;
pub mod segment;
pub mod sim;
pub mod state;
