//! Trace sources: an OpenAI-compatible completions client, an exact
//! synthetic LM, and an in-process mock server for the client.

pub mod client;
pub mod config;
pub mod mock;
pub mod synth;

pub use client::{BackendError, CompletionBackend, CompletionClient};
pub use config::{BackendConfig, RetryConfig};
