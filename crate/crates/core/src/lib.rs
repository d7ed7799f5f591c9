//! Streaming far-field expressway anomaly engine.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod config;
pub mod eval;
pub mod frenet;
pub mod geom;
pub mod ingest;
pub mod kinematics;
pub mod localization;
pub mod pipeline;
pub mod reasoner;
pub mod simulator;
pub mod tiling;
