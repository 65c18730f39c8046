//! Anchor-free pedestrian detection toolkit.
//!
//! A stride-4 center/scale detector ("focal detection network") trained with a
//! penalty-reduced focal loss, a light second-stage suppression head that only
//! rescales scores, and the log-average miss rate benchmark protocol. Everything
//! runs in double precision on a small hand-written autodiff engine and is
//! exercised on deterministic synthetic scenes.

pub mod decode;
pub mod detect;
pub mod encode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod nn;
pub mod suppress;

pub use error::{Error, Result};
pub use geometry::{ioa, iou, Annotation, BBox, Detection, GridShape};
