//! Cascaded bounding-box regression and classification over synthetic
//! proposals.
//!
//! Each stage of the cascade is trained on the boxes regressed by the stage
//! before it, at a progressively higher IoU threshold. The crate also ships
//! the two usual points of comparison (one regressor applied iteratively and
//! a multi-threshold classifier ensemble sharing one box distribution), a
//! COCO-style evaluator, and a seeded synthetic benchmark that stands in for
//! images and a proposal network.

pub mod assign;
pub mod cascade;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
pub use geometry::{BBox, Delta, NormStats};
