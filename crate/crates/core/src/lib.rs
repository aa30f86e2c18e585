//! Monocular affine-invariant depth estimation as conditional denoising
//! diffusion, at desk scale.
//!
//! The crate covers depth normalisation and the latent codec convention,
//! DDPM/DDIM schedules, annealed multi-resolution noise, a toy conditional
//! denoiser with hand-written gradients, test-time ensembling, the
//! affine-invariant evaluation protocol, geometry helpers and a procedural
//! RGB-D scene generator.

pub mod data;
pub mod denoiser;
pub mod depthnorm;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod geometry;
pub mod grids;
pub mod mrnoise;
pub mod pipeline;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use grids::{Grid2, Latent3, Mask, RgbImage};
