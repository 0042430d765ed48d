//! Configuration, orchestration and reporting for aubry-core experiments.

pub mod config;
pub mod report;
pub mod run;
