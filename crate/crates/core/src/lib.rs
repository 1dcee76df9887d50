//! Supervised sim2real adaptation by conditional alignment and reweighting.
//!
//! The crate is organized by stage:
//!
//! - [`annotations`]: loading, validating and subsampling box annotations.
//! - [`content_stats`]: class weights, class-conditional box KDEs and the
//!   smoothed box-ratio weights, plus the gap report.
//! - [`alignment`]: the cross-domain cycle-consistency loss and the linear
//!   MMD baseline, both with exact gradients.
//! - [`toy`]: a synthetic instance-level detection task and a small
//!   encoder/head model.
//! - [`trainer`]: the weighted three-term objective, baselines and the
//!   ablation bench.
//! - [`verify`]: exact checks of the importance-reweighting identity on
//!   finite distributions.
//! - [`cli`]: the `care` command-line tool.

// Validation uses `!(x > 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod annotations;
pub mod cli;
pub mod content_stats;
pub mod toy;
pub mod trainer;
pub mod verify;
