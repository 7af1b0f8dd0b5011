//! Experiment configuration, independent oracles, benchmark and ablation
//! runners, and report emission.

pub mod config;
pub mod harness;
pub mod oracles;
pub mod pipeline;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use harness::{benchmark, run_ablation, run_benchmark, Variant};
pub use report::{emit_report, MetricsReport};
