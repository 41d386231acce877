//! Anchor-free Siamese single-object tracking with localization-aware
//! training targets and a dedicated localization-quality branch.

// Comparisons are written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod frame;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod labeling;
pub mod losses;
pub mod maps;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
