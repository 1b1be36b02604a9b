//! Reconstruction of a neural signed-distance field and surface material from
//! single-view images captured under multiple known lights, by differentiably
//! supervising shadow rays.
//!
//! The crate is organized bottom-up:
//!
//! * [`diffengine`] — minimal reverse-mode autodiff over dense arrays.
//! * [`fields`] — neural SDF / material networks, analytic SDF primitives,
//!   positional encoding, normals and the eikonal regularizer.
//! * [`raycast`] — ray marching, differentiable intersections and
//!   silhouette-boundary detection.
//! * [`shadowrender`] — shadow-ray sampling and transmittance integration.
//! * [`shading`] — spherical-Gaussian speculars, the rendering equation and
//!   loss assembly.
//! * [`scenes`] — synthetic dataset generation (brute-force oracle renderer)
//!   and dataset I/O.
//! * [`trainer`] — the optimization loop, schedules and checkpoints.
//! * [`evaluate`] — depth/normal metrics, mesh extraction, relighting.

pub mod diffengine;
pub mod evaluate;
pub mod fields;
pub mod math;
pub mod raycast;
pub mod scenes;
pub mod shading;
pub mod shadowrender;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use math::{Ray, Vec3};
