//! Experiment driver library: configuration, dataset/checkpoint/metrics
//! persistence, the pipeline phases behind each CLI subcommand, and report
//! generation.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod metrics;
pub mod pipeline;
pub mod report;
