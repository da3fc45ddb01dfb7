//! Keypoint localization by per-pixel direction voting, and pose estimation
//! that weights each keypoint by the spread of its votes.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod field;
pub mod geometry;
pub mod model;
pub mod pnp;
pub mod voting;
