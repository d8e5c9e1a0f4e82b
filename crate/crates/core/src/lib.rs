//! Uncertainty-aware charge autotuning for single quantum dots.

pub mod calibrate;
pub mod detector;
pub mod diagram;
pub mod exec;
pub mod explorer;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod synthgen;
