//! Heterogeneous-effect estimation on top of the contrast scores: group
//! averages via regression, smooth curves in one moderator, and per-unit
//! effect learners.

pub mod bspline;
pub mod gate;
pub mod iate;
