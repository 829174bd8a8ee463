//! Data generation, training, evaluation and ablation drivers around
//! `dpmn-core`.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod report;
pub mod train;
