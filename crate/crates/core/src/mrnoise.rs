//! Seeded Gaussian noise and multi-resolution (pyramid) noise, including
//! the annealed variant whose coarse levels fade out as `t -> 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grids::{resize_bilinear, Grid2};
use crate::rng::derive_seed;

/// I.i.d. standard normal grid, deterministic in `seed`.
pub fn gaussian_noise(height: usize, width: usize, seed: u64) -> Grid2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid2::from_fn(height, width, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Multires,
    Annealed,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Gaussian, NoiseKind::Multires, NoiseKind::Annealed];
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "multires" => Ok(Self::Multires),
            "annealed" | "annealed_multires" => Ok(Self::Annealed),
            other => Err(Error::InvalidRange(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Multires => "multires",
            Self::Annealed => "annealed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Influence of coarser levels, `0 < s < 1`.
    pub strength: f64,
    /// Pyramid depth; `None` uses every full octave of the grid.
    pub levels: Option<usize>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Annealed,
            strength: 0.9,
            levels: None,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == NoiseKind::Gaussian {
            return Ok(());
        }
        if !(self.strength > 0.0 && self.strength < 1.0) {
            return Err(Error::InvalidRange(format!(
                "noise strength {} outside (0, 1)",
                self.strength
            )));
        }
        if self.levels == Some(0) {
            return Err(Error::InvalidCount("pyramid needs at least one level".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Number of pyramid levels used for an `height x width` grid.
    pub fn level_count(&self, height: usize, width: usize) -> usize {
        match self.kind {
            NoiseKind::Gaussian => 1,
            _ => self.levels.unwrap_or_else(|| default_levels(height, width)),
        }
    }

    /// Weight of each pyramid level at step `t` of `total`.
    pub fn level_weights(&self, levels: usize, t: usize, total: usize) -> Vec<f64> {
        let base = match self.kind {
            NoiseKind::Gaussian => return vec![1.0],
            NoiseKind::Multires => self.strength,
            NoiseKind::Annealed => self.strength * t as f64 / total as f64,
        };
        (0..levels).map(|i| base.powi(i as i32)).collect()
    }

    /// Noise for a training sample at step `t`. The Gaussian kind returns the
    /// raw i.i.d. draw; pyramid kinds go through [`multires_noise`].
    pub fn sample(&self, height: usize, width: usize, t: usize, total: usize) -> Result<Grid2> {
        match self.kind {
            NoiseKind::Gaussian => Ok(gaussian_noise(height, width, self.seed)),
            _ => multires_noise(height, width, self, t, total),
        }
    }
}

/// Full octaves between the grid size and a single pixel.
pub fn default_levels(height: usize, width: usize) -> usize {
    (usize::BITS - 1 - height.min(width).leading_zeros()).max(1) as usize
}

fn level_seed(seed: u64, level: usize) -> u64 {
    derive_seed(seed, "pyramid-level", level as u64)
}

/// Level `i` of the pyramid: an i.i.d. draw at `1 / 2^i` resolution
/// (clamped to 1x1), upsampled bilinearly to full size.
pub fn pyramid_level(height: usize, width: usize, seed: u64, level: usize) -> Grid2 {
    let lh = (height >> level.min(63)).max(1);
    let lw = (width >> level.min(63)).max(1);
    let coarse = gaussian_noise(lh, lw, level_seed(seed, level));
    resize_bilinear(&coarse, height, width).expect("non-empty target")
}

/// Weighted sum of pyramid levels, divided by `sqrt(sum w_i^2)` and then
/// standardised to zero mean and unit population variance over the grid.
pub fn multires_noise(
    height: usize,
    width: usize,
    spec: &NoiseSpec,
    t: usize,
    total: usize,
) -> Result<Grid2> {
    spec.validate()?;
    if t > total {
        return Err(Error::InvalidRange(format!("timestep {t} outside 0..={total}")));
    }
    let levels = spec.level_count(height, width);
    let weights = spec.level_weights(levels, t, total);
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let mut acc = vec![0.0; height * width];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let level = pyramid_level(height, width, spec.seed, i);
        for (a, v) in acc.iter_mut().zip(level.values()) {
            *a += w * v;
        }
    }
    for a in &mut acc {
        *a /= norm;
    }
    Ok(standardize(Grid2::new(height, width, acc)?))
}

/// Shifts and scales to zero mean and unit population variance. A grid
/// with zero variance is only centred.
pub fn standardize(mut grid: Grid2) -> Grid2 {
    let n = grid.len() as f64;
    let mean = grid.mean();
    let var = grid.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { var.sqrt().recip() } else { 1.0 };
    for v in grid.values_mut() {
        *v = (*v - mean) * scale;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: NoiseKind, strength: f64, levels: Option<usize>, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind,
            strength,
            levels,
            seed,
        }
    }

    fn moments(g: &Grid2) -> (f64, f64) {
        let n = g.len() as f64;
        let m = g.mean();
        (m, g.values().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
    }

    fn lag2_autocorrelation(g: &Grid2) -> f64 {
        let (m, var) = moments(g);
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..g.height() {
            for x in 0..g.width() - 2 {
                sum += (g.get(y, x) - m) * (g.get(y, x + 2) - m);
                count += 1.0;
            }
        }
        sum / count / var
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_dependent() {
        assert_eq!(gaussian_noise(8, 8, 42), gaussian_noise(8, 8, 42));
        assert_ne!(gaussian_noise(8, 8, 42), gaussian_noise(8, 8, 43));
    }

    #[test]
    fn gaussian_moments() {
        let g = gaussian_noise(1000, 1000, 9);
        let (mean, var) = moments(&g);
        assert!(mean.abs() < 4e-3, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn default_level_count() {
        assert_eq!(default_levels(64, 64), 6);
        assert_eq!(default_levels(64, 48), 5);
        assert_eq!(default_levels(1, 1), 1);
        assert_eq!(default_levels(3, 100), 1);
    }

    #[test]
    fn multires_weights_and_normaliser() {
        let s = spec(NoiseKind::Multires, 0.5, Some(3), 0);
        let w = s.level_weights(3, 17, 100);
        assert_eq!(w, vec![1.0, 0.5, 0.25]);
        let norm: f64 = w.iter().map(|x| x * x).sum();
        assert!((norm - 1.3125).abs() < 1e-15);
    }

    #[test]
    fn annealed_endpoints() {
        let annealed = spec(NoiseKind::Annealed, 0.8, None, 5);
        let multires = spec(NoiseKind::Multires, 0.8, None, 5);
        assert_eq!(
            multires_noise(32, 32, &annealed, 100, 100).unwrap(),
            multires_noise(32, 32, &multires, 100, 100).unwrap()
        );
        let at_zero = multires_noise(32, 32, &annealed, 0, 100).unwrap();
        let level0 = standardize(pyramid_level(32, 32, 5, 0));
        let err = at_zero
            .values()
            .iter()
            .zip(level0.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
        assert_eq!(annealed.level_weights(4, 0, 100), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(multires_noise(8, 8, &spec(NoiseKind::Multires, 1.0, None, 0), 1, 10).is_err());
        assert!(multires_noise(8, 8, &spec(NoiseKind::Multires, 0.5, Some(0), 0), 1, 10).is_err());
        assert!(multires_noise(8, 8, &spec(NoiseKind::Multires, 0.5, None, 0), 11, 10).is_err());
        assert!(spec(NoiseKind::Gaussian, 7.0, Some(0), 0).validate().is_ok());
    }

    #[test]
    fn multires_has_more_low_frequency_content() {
        let (mut gauss, mut multi) = (0.0, 0.0);
        for seed in 0..100 {
            gauss += lag2_autocorrelation(&gaussian_noise(32, 32, seed));
            let s = spec(NoiseKind::Multires, 0.9, None, seed);
            multi += lag2_autocorrelation(&multires_noise(32, 32, &s, 50, 100).unwrap());
        }
        assert!(multi / 100.0 > gauss / 100.0 + 0.05, "{multi} vs {gauss}");
    }

    #[test]
    fn single_pixel_grid_is_centred() {
        let g = multires_noise(1, 1, &spec(NoiseKind::Multires, 0.5, None, 1), 1, 1).unwrap();
        assert_eq!(g.values(), &[0.0]);
    }

    proptest! {
        #[test]
        fn output_is_exactly_standardised(kind in 0usize..3, strength in 0.05f64..0.95,
                                          levels in 1usize..6, seed in 0u64..1000,
                                          t in 0usize..=100, h in 2usize..24, w in 2usize..24) {
            let s = spec(NoiseKind::ALL[kind], strength, Some(levels), seed);
            let g = multires_noise(h, w, &s, t, 100).unwrap();
            let (mean, var) = moments(&g);
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-12);
            prop_assert_eq!(&g, &multires_noise(h, w, &s, t, 100).unwrap());
        }

        #[test]
        fn annealed_weights_monotone(strength in 0.05f64..0.95, t1 in 0usize..=1000, t2 in 0usize..=1000) {
            let s = spec(NoiseKind::Annealed, strength, Some(6), 0);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let wl = s.level_weights(6, lo, 1000);
            let wh = s.level_weights(6, hi, 1000);
            for i in 0..6 {
                prop_assert!(wl[i] <= wh[i]);
                if i > 0 {
                    prop_assert!(wh[i] <= wh[i - 1]);
                }
            }
        }
    }
}
