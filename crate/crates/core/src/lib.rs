//! Phase-space solver and certification tools for kinetic Fokker–Planck
//! equations with general force.

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod harris;
pub mod model;
pub mod positivity;
pub mod sampling;
pub mod solver;
pub mod weights;

pub use error::{KfpError, Result};
