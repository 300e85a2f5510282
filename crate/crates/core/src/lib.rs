//! Reranking sampled programs by how well they explain their instruction.

pub mod corpus;
pub mod evaluation;
pub mod executor;
pub mod filter;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod rerank;
pub mod scoring;
pub mod synth;
