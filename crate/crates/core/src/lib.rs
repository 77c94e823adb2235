//! Bayesian-optimization interrogation of face classifiers for demographic
//! failure modes.

pub mod acquisition;
pub mod cli;
pub mod config;
pub mod generators;
pub mod gp;
pub mod interrogator;
pub mod reporting;
pub mod search_space;
pub mod targets;
