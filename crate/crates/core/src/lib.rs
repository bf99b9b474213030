//! Entropy-guided pruning of reasoning steps in chain-of-thought traces.

pub mod entropy;
pub mod prune;
pub mod reward;
pub mod rng;
pub mod segment;
pub mod trace;
pub mod backend;
pub mod experiment;
