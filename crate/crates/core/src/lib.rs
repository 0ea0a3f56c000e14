//! Keyframe dense depth fusion.

pub mod geometry;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod fusion;
pub mod predictions;
pub mod pipeline;
pub mod selftest;
pub mod semidense;
pub mod synth;
