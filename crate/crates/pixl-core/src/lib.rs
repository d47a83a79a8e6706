//! Core library for pixl: procedural multi-illumination data generation with
//! exact intrinsic ground truth, a tape-based autodiff engine, and a
//! feed-forward relighting model conditioned on target-light intrinsics.

pub mod augment;
pub mod autodiff;
pub mod imgcore;
pub mod intrinsics;
pub mod metrics;
pub mod model;
pub mod train;
pub mod scenegen;
