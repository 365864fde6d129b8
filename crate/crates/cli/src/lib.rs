//! Command-line front end: config loading, the run commands, ablation
//! studies, manifests and plots.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;
pub mod study;
