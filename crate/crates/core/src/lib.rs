//! Desk-scale pose-regression fusion toolkit: quaternion geometry,
//! uncertainty-weighted pose losses, weight-sewing early fusion, score-level
//! late fusion and their hybrid combinations, a synthetic trajectory
//! benchmark, and an evaluation harness.

pub mod data;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod util;
