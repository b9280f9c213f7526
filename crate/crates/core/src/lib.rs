//! Toolkit for keyword-constrained text generation with LLMs.
//!
//! * [`constraint`] tokenizes text and decides which keywords it contains.
//! * [`metrics`] turns that into instance success and keyword coverage.
//! * [`backend`] talks to generation servers (HTTP, scripted replay, cache).
//! * [`synthetic`] is a seeded stand-in model with controllable failure modes.
//! * [`strategies`] runs vanilla prompting, rejection sampling and
//!   divide-and-conquer generation on top of any backend.
//! * [`experiments`] batches trials into resumable JSONL runs with CSV summaries.

pub mod backend;
pub mod config;
pub mod constraint;
pub mod data;
pub mod experiments;
pub mod metrics;
pub mod stats;
pub mod strategies;
pub mod synthetic;
