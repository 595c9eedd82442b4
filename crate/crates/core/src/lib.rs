//! Two-stage text generation at desk scale: an event transition planner
//! (a prompt-tuned causal language model over event graphs) feeding a
//! path-aware generator (the same transformer family with an event query
//! layer fused into its last block).
//!
//! Everything runs on a small tape-based autodiff engine in `tensor`; all
//! randomness flows through seeded generators so that training, sampling,
//! decoding, and reports are reproducible bit for bit.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod extract;
pub mod generator;
pub mod graph;
pub mod lm;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
