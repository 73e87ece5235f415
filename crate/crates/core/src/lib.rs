//! Caption investigation, cloze-style caption evaluation, caption-to-QA
//! cascade scoring and arena Elo rating, runnable against remote chat
//! backends or deterministic mocks.

pub mod arena;
pub mod cascade;
pub mod cloze;
pub mod config;
pub mod detective;
pub mod gateway;
pub mod json_extract;
pub mod jsonl;
pub mod model;
pub mod prompt;
pub mod synth;
