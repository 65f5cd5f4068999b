//! Run orchestration: configuration, binary containers, synthetic data,
//! stage runners, benchmarking and reports.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod report;
pub mod stages;
pub mod sweep;
pub mod synth;

pub use config::RunConfig;
pub use container::Dataset;
