//! Retrieval-grounded instruction dataset construction.
//!
//! The pipeline expands a small set of seed questions into a larger
//! instruction pool, grounds each instruction in retrieved evidence, and
//! synthesizes answers into supervised fine-tuning records. A second flow
//! captures a base model's answers and minimally revises them into
//! preference triples for knowledge updates.

pub mod cli;
pub mod editing;
pub mod expansion;
pub mod filtering;
pub mod gateway;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod seeds;
pub mod synthesis;
