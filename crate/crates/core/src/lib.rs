//! Hierarchical visual localization against a prebuilt keyframe/landmark map.
//!
//! A query is first compared to the map's keyframes by global descriptor;
//! the retrieved prior frames are grouped into places by covisibility and
//! each place is matched locally and verified with P3P-RANSAC until a pose
//! is found. A direct whole-map matcher is provided as a baseline.

pub mod ann;
pub mod cli;
pub mod covisibility;
pub mod error;
pub mod eval;
pub mod format;
pub mod geometry;
pub mod global_index;
pub mod map;
pub mod matching;
pub mod pipeline;
pub mod pnp;
pub mod synth;

pub use error::{Error, Result};
