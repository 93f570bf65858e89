//! segrank-core: batch evaluation and meta-analysis engine for
//! multi-annotator 3D semantic segmentation challenges.
//!
//! The crate covers the full scoring pipeline: label-volume I/O
//! ([`volgrid`]), multi-annotation composites ([`annotations`]),
//! volumetric and surface Dice over hierarchical evaluation classes
//! ([`metrics`]), connected-component postprocessing ([`postprocess`]),
//! leaderboard ranking with bootstrap stability and pairwise significance
//! ([`ranking`]), hidden-strata regression and clustering ([`strata`]),
//! and the end-to-end orchestration used by the `segrank` CLI
//! ([`engine`]).

pub mod annotations;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod postprocess;
pub mod ranking;
pub mod stats;
pub mod strata;
pub mod volgrid;

pub use error::{Error, Result};
