//! Direct-time hierarchical graph surrogate for fluid fields on irregular meshes.
//!
//! A time step `t` and physical parameters `lambda` are embedded at a single
//! node, then pushed through spline convolutions over a pyramid of
//! progressively finer meshes until they reach the simulation mesh, where
//! the last layer emits pressure and velocity.
//!
//! - [`geometry`]: domain, mesh pyramid, radius neighborhoods
//! - [`splineconv`]: B-spline basis and spline convolution with its reverse pass
//! - [`nn`]: dense layers, batch norm, MSE, Adam, plateau schedule, gradient checks
//! - [`model`]: the assembled decoder
//! - [`dataset`]: field files, pointwise normalization, synthetic flows
//! - [`trainer`]: training loop, evaluation metrics, model directories
//! - [`verify`]: seeded whole-model gradient check

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod nn;
pub mod splineconv;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
