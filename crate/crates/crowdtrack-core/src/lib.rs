//! Counting-constrained multi-object tracking core.
//!
//! The crate couples three ingredients that are usually built separately:
//!
//! * crowd density maps whose region sums are object counts ([`density`]),
//! * per-frame detection refinement driven by count consistency between
//!   detections and the density map ([`refine`]), and
//! * an online tracker (Kalman filtering, appearance + motion association,
//!   Hungarian assignment) with CLEAR MOT / IDF1 evaluation
//!   ([`track`], [`metrics`]).
//!
//! A reference loss library ([`losses`]) implements the training objectives
//! with analytic gradients, and [`sim`] generates seeded synthetic crowd
//! scenes used by the test and benchmark suites.
//!
//! The crate is `no_std` + `alloc`; all IO, file formats and the CLI live in
//! the companion `crowdtrack` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod density;
pub mod losses;
mod math;
pub mod metrics;
pub mod model;
pub mod refine;
pub mod rng;
pub mod sim;
pub mod track;

pub use model::{BBox, Detection, Embedding, GridGeometry, EMBEDDING_DIM};
