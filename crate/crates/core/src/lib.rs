//! Simulation and analysis of a biological transport network formation model.
//!
//! The model couples a Darcy-type pressure equation with a reaction-diffusion
//! equation for a vector-valued conductance field. This crate provides:
//!
//! - [`mesh`]: triangulations of 2D polygonal domains with boundary markers,
//! - [`fem`]: P1 / P0 / lowest-order Raviart-Thomas spaces, assembly and solves,
//! - [`dynamics`]: IMEX time integration with adaptive step control, energy
//!   and stationarity diagnostics,
//! - [`stationary`]: stationary states for vanishing diffusion via a penalty
//!   method (gradient-constrained case) and a convex variational construction,
//! - [`oned`]: the one-dimensional reduction with closed-form pressure
//!   gradient, extinction analysis and stationary-point classification,
//! - [`config`] / [`io`] / [`experiment`]: experiment configuration,
//!   serialization (mesh text format, legacy VTK, CSV) and orchestration.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod oned;
pub mod stationary;

pub use error::{Error, Result};
