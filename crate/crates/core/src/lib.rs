//! Harmonized detection toolkit: mutual labeling of candidate samples, IoU
//! rescoring, and a rank-correlation measure of the disagreement between
//! classification confidence and localization quality.
//!
//! The [`sim`] module pairs these with a seeded synthetic-scene generator and
//! a linear detection head so the whole pipeline can be trained and
//! benchmarked on a desktop.

pub mod assignment;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod postprocess;
pub mod sim;
pub mod thresholding;

pub use assignment::{AssignmentConfig, AssignmentResult, Candidate, GroundTruth, Matcher, Origin};
pub use geometry::{BBox, BoxDelta};
pub use postprocess::{Detection, NmsConfig, NmsMode};
