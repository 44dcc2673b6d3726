//! Stochastic receding-horizon control through sphere worlds.
//!
//! A navigation function supplies a reference path that is cut into waypoints
//! with obstacle-free annular neighborhoods. Each annulus is then crossed with
//! the exit-time optimal feedback for a controlled diffusion.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod executor;
pub mod field;
pub mod geometry;
pub mod models;
pub mod planner;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use nalgebra::{SMatrix, SVector};
