//! Pipeline orchestration: configuration, discovery, the end-to-end
//! run, incremental stages, report files, and run provenance.

pub mod config;
pub mod discover;
pub mod manifest;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use discover::{discover, Discovery};
pub use manifest::RunManifest;
pub use run::run_evaluation;
