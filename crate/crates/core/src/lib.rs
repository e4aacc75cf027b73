//! Elevation-aware road network pipeline.

// `!(x > 0.0)` rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builder;
pub mod cosim;
pub mod dem;
pub mod export;
pub mod geo;
pub mod pipeline;
pub mod road;
pub mod synth;
pub mod validation;
