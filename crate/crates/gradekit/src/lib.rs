//! gradekit: interpretable volumetric grading at desk scale.
//!
//! The pipeline turns a labeled 3D volume into a grading map in [-1, 1]
//! (disease-like to healthy-like per voxel), built by an ensemble of
//! patch-location specialists fused with accuracy-weighted voting, then
//! classifies subjects from per-structure features with a graph
//! convolutional network over a complete structure graph.
//!
//! Everything runs on synthetic phantom cohorts with ground-truth labels,
//! so the full train/grade/classify/report loop is reproducible on a
//! desktop CPU. See the `book/` guide for a narrative tour.

pub mod braingraph;
pub mod diffcore;
pub mod grader;
pub mod ensemble;
pub mod error;
pub mod phantom;
pub mod volgrid;

pub use error::{Error, Result};
