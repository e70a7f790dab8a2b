//! Automated build-environment configuration: repository priors, a sandboxed
//! agent loop with expert diagnosis and self-evolving rules, Dockerfile
//! consolidation and evaluation metrics.

pub mod command;
pub mod expert;
pub mod llm;
pub mod prior;
pub mod sandbox;
pub mod agent;
pub mod dockerfile;
pub mod eval;
