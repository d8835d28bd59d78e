//! Experiment plumbing for the `canonix` binary: configuration, run
//! manifests, staged training and the command implementations.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;
