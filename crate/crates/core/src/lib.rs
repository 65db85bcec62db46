//! Two-level structural topology optimization on Cartesian grids.
//!
//! A coarse SIMP pass assigns one density per cell, the coarse finite element
//! solution is converted into equilibrated linear edge tractions, and every
//! cell is then optimized independently on a fine mesh under those tractions.
//! The fine layouts are stitched into one high-resolution image.

pub mod band;
pub mod coarse_opt;
pub mod equilibrate;
pub mod fem;
pub mod fine_opt;
pub mod grid;
pub mod orchestrator;
