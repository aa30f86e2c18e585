//! Procedural RGB-D training data, mixed-domain sampling and depth file I/O.

mod io;
mod scene;

pub use io::{
    read_depth, read_intrinsics, read_manifest, read_rgb, write_depth, write_intrinsics,
    write_manifest, write_rgb, DepthFormat, ManifestEntry,
};
pub use scene::{render_scene, Hit, Primitive, Scene, SceneSpec, Shape, FOCAL_SCALE};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grids::{Grid2, Mask, RgbImage};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Indoor,
    Outdoor,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Indoor => "indoor",
            Domain::Outdoor => "outdoor",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(Domain::Indoor),
            "outdoor" => Ok(Domain::Outdoor),
            other => Err(Error::MalformedFile(format!("unknown domain `{other}`"))),
        }
    }
}

/// An RGB-D training pair with metric z-depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub depth: Grid2,
    pub mask: Mask,
    pub domain: Domain,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    /// Probability of drawing from the indoor generator.
    pub p_indoor: f64,
    pub seed: u64,
}

impl Default for MixSpec {
    /// Mostly indoor with a 10% outdoor share.
    fn default() -> Self {
        Self {
            p_indoor: 0.9,
            seed: 0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_indoor) {
            return Err(Error::InvalidRange(format!(
                "p_indoor {} outside [0, 1]",
                self.p_indoor
            )));
        }
        Ok(())
    }

    /// Domain of draw `index`, a Bernoulli(`p_indoor`) trial.
    pub fn domain(&self, index: u64) -> Domain {
        let mut rng = stream(self.seed, "mix-domain", index);
        if rng.random::<f64>() < self.p_indoor {
            Domain::Indoor
        } else {
            Domain::Outdoor
        }
    }

    pub fn scene_seed(&self, index: u64) -> u64 {
        derive_seed(self.seed, "mix-scene", index)
    }
}

/// `n` samples; each draw first picks its domain, then renders a scene with
/// a seed derived from `(mix.seed, index)`.
pub fn mixed_sampler(mix: &MixSpec, n: usize, height: usize, width: usize) -> Result<Vec<Sample>> {
    mixed_sampler_from(mix, 0, n, height, width)
}

/// Draws `start..start + n` of the same deterministic sequence.
pub fn mixed_sampler_from(
    mix: &MixSpec,
    start: u64,
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Sample>> {
    mix.validate()?;
    if n == 0 {
        return Err(Error::InvalidCount("need at least one sample".into()));
    }
    (start..start + n as u64)
        .map(|i| {
            let spec = SceneSpec::for_domain(mix.domain(i), height, width, mix.scene_seed(i));
            render_scene(spec)
        })
        .collect()
}
