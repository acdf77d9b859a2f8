//! Expansion of abbreviated column names in table collections with an LLM,
//! plus the metrics used to score the expansions.

pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod generator;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod prompts;
pub mod reviser;
pub mod summarizer;
