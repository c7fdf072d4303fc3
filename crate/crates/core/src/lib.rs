//! Knowledge-grounded task-oriented dialogue.

pub mod corpus;
pub mod generator;
pub mod inference;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod sampler;
pub mod scorer;
pub mod tokenizer;
