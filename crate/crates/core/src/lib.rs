//! Deterministic discrete-event simulator for harvesting idle time ("bubbles")
//! in pipeline-parallel training and serving side tasks inside it.
//!
//! The crate is organized bottom-up:
//!
//! - [`pipeline`] builds the 1F1B training schedule and extracts classified bubbles.
//! - [`task`] holds the side-task lifecycle state machine and interface semantics.
//! - [`profiler`] estimates task step length and memory, and profiles bubbles.
//! - [`manager`] assigns tasks to workers and reacts to bubble start/end events.
//! - [`limits`] implements memory caps, the remaining-time gate and grace-period kills.
//! - [`engine`] wires everything onto one logical clock and produces a [`engine::RunTrace`].
//! - [`metrics`] derives time increase, cost savings and the bubble-time breakdown.
//! - [`experiment`] loads experiment documents and presets.

pub mod engine;
pub mod error;
pub mod experiment;
pub mod limits;
pub mod manager;
pub mod metrics;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod pipeline;
pub mod profiler;
pub mod task;
pub mod time;

pub use error::{ConfigError, Error, Result};
pub use time::SimTime;
