//! Sweeps, baselines, dataset building, the mutual-information oracle and
//! report rendering.

pub mod dataset;
pub mod mi;
pub mod report;
pub mod sweep;
pub mod tasks;
pub mod token_baseline;
