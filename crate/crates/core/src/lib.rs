//! Mixed-curvature continual learning.
//!
//! Streamed classes are embedded into a growing product of constant-curvature
//! spaces, classified by geodesic distance to per-class prototypes, and protected
//! against forgetting by penalizing changes in the angles and neighborhoods of
//! replayed exemplars.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gis;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod product;
pub mod selfcheck;

pub use error::{Error, Result};
