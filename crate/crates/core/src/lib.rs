//! Numerical core for single-image de-rendering.
//!
//! An image of an object is explained by a depth map, a refinement normal
//! map, a per-pixel albedo, a global Phong material (shininess and specular
//! intensity) and a single directional light plus ambient term. This crate
//! holds the forward model and its hand-written derivatives, the coarse
//! light/albedo estimators, the loss stack, evaluation metrics and a
//! per-image direct fitter.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and the HTTP service live in the `derender` crate.
#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod coarse;
mod error;
pub mod fit;
pub mod formation;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod raster;

pub use error::{Error, Result};
pub use math::Vec3;
pub use raster::{Grid, Image, Mask, NormalMap, Rgb, ScalarMap};
