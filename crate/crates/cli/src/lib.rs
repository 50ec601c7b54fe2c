//! Experiment runner, reports and command line for `inlierq-core`.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod selftest;
