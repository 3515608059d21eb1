//! Procedural data, configuration, persistence, the staged training
//! pipeline and evaluation.

pub mod config;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod run;
pub mod scene;
