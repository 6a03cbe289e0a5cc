// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multiple change point detection for piecewise-stationary vector
//! autoregressive (VAR) models with sparse, group sparse, or
//! low-rank-plus-sparse transition matrices.
//!
//! Two detectors are provided:
//!
//! * [`tbss`]: block fused lasso, localized information criterion screening,
//!   exhaustive search and a lasso refit. Handles sparse, group sparse and
//!   fixed-low-rank-plus-sparse transition matrices.
//! * [`lstsp`]: rolling-window single change point search followed by backward
//!   elimination and a per-segment low-rank-plus-sparse refit.
//!
//! [`datagen`] synthesizes piecewise-stationary VAR data and [`eval`] scores
//! detections against a known truth. All time indices in the public API are
//! 1-based; a change point `t` is the first time point of the new regime.

#![forbid(unsafe_code)]

pub mod datagen;
pub mod error;
pub mod eval;
pub mod lstsp;
pub mod solvers;
pub mod tbss;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    companion_spectral_radius, make_blocks, stack_lag_rows, BlockPartition, DetectionResult,
    Grouping, LaggedDesign, PenaltyKind, PenaltySpec, PiecewiseVarModel, TimeSeries,
    TransitionSet,
};
