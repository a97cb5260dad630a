//! Agent-tuning data generation: topic and dataset ingestion, role-play
//! dialogues, tool-use trajectories, hallucination verification and
//! fine-tune export.

pub mod ingest;
pub mod pipeline;
pub mod prompt;
pub mod provider;
pub mod roleplay;
pub mod trajectory;
pub mod tuning;
pub mod types;
pub mod verify;

pub use provider::{CompletionProvider, CompletionRequest, CompletionResult, HttpProvider, ProviderError, ScriptedProvider};
pub use types::{GenerationConfig, Framework, Topic, TopicKind};
