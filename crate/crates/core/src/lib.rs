//! Persistent-variable two-phase, two-component flow in porous media.

pub mod config;
pub mod constitutive;
pub mod diagnostics;
pub mod error;
pub mod expr;
pub mod fem;
pub mod global_pressure;
pub mod mesh;
pub mod numerics;
pub mod output;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
