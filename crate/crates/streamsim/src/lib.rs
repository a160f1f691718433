//! Deterministic streaming-perception testbed: synthetic scenes, a delay-aware
//! scheduler with temporal-cue planning, correlation/difference forecasting
//! kernels, a virtual-clock streaming runtime and a streaming-AP evaluator.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod forecaster;
pub mod kernels;
pub mod scene;
pub mod scheduler;
pub mod simrt;
pub mod types;

pub use error::{Error, Result};
