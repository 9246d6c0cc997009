//! Functional-connectivity graph contrastive learning with a dynamic-graph
//! classifier, for dyadic multi-channel physiological recordings.
//!
//! The pipeline: slide windows over paired ROI time series
//! ([`connectivity`]), build per-window connectivity graphs, pretrain a
//! spectral graph encoder with a contrastive objective over dyad-positive
//! pairs ([`encoder`], [`contrastive`]), then classify trial embeddings
//! transductively on a nearest-neighbor population graph with a focal-loss
//! objective ([`dgc`]). [`eval`] owns metrics, stage-wise reporting and the
//! leave-dyad-out protocol; [`synthdata`] generates seeded synthetic dyads so
//! the whole chain can be exercised without recordings.

pub mod connectivity;
pub mod contrastive;
pub mod dgc;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod synthdata;
pub mod numcore;

pub use error::{FgclError, Result};
