//! forge: a self-hosted CI/CD engine for small teams.
//!
//! A `Pipelinefile` declares cron-gated SCM poll triggers, an ordered list
//! of stages (optionally with parallel branches), release gates, and
//! delivery effects. The engine polls, runs each new commit through the
//! stages fail-fast, and persists a [`executor::RunRecord`] per run.

pub mod cron;
pub mod delivery;
pub mod dsl;
pub mod executor;
pub mod gates;
pub mod redact;
pub mod scm;
pub mod store;
pub mod cli;
pub mod daemon;
pub mod fixtures;
