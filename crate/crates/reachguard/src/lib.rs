//! Grid-based Hamilton-Jacobi reachability toolkit and an N+1 vehicle
//! collision-avoidance framework built on top of it.
//!
//! Sets are represented as sub-zero level sets of value functions sampled on
//! rectangular grids. Backward and forward reachable sets are computed with a
//! Lax-Friedrichs scheme. The `reach_sets`, `hybrid`, and `sim` modules stack
//! pairwise conflict tables, outsider unsafe regions, and a staged controller
//! on top of the solver to coordinate N+1 planar vehicles of which only N can
//! be handled by a cooperative avoidance routine at a time.

pub mod cache;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod hj_solver;
pub mod hybrid;
pub mod reach_sets;
pub mod sim;
pub mod slice;
pub mod verify;

pub use error::{Error, Result};
