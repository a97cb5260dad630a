//! Job service, persistence and command line for the generation pipeline.

pub mod api;
pub mod app;
pub mod cli;
pub mod job;
pub mod scheduler;
pub mod store;
pub mod topics;
