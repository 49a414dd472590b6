//! Core algorithms for evaluating vision-language models on chest X-rays
//! under gaze and no-gaze conditions.
//!
//! This crate holds everything that is pure computation: gaze stream
//! validation and heatmap accumulation, red-dot overlay compositing,
//! construction of the five task sets (including seeded synthetic error
//! injection), answer extraction from raw model text, and the scoring
//! metrics. It is `no_std` (with `alloc`); file formats, image codecs,
//! networking, and the CLI live in the companion `gazemark` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corrupt;
pub mod extract;
pub mod gaze;
pub mod metrics;
pub mod overlay;
pub mod task;
pub mod text;

pub use task::{Condition, TaskInstance, TaskKind};
