//! Dense 2-D float grids, validity masks and three-channel stacks.
//!
//! Every other module stores depth maps, noise, latents and metrics inputs in
//! these types. Values are `f64` in row-major order.

use crate::error::{Error, Result};

/// Row-major grid of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2 {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidShape {
                height,
                width,
                len: values.len(),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Panics if either dimension is zero.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two grids of equal shape.
    pub fn zip_map(&self, other: &Grid2, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_shape(other.shape())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: shape,
            });
        }
        Ok(())
    }

    /// Mirror along the vertical axis (left-right flip).
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Checks that every value flagged valid by `mask` is finite.
    pub fn check_finite(&self, mask: &Mask) -> Result<()> {
        mask.check_shape(self)?;
        for (v, ok) in self.values.iter().zip(mask.valid()) {
            if *ok && !v.is_finite() {
                return Err(Error::NonFinite(*v));
            }
        }
        Ok(())
    }
}

/// Per-pixel validity flags for a grid of the same shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || valid.len() != height * width {
            return Err(Error::InvalidShape {
                height,
                width,
                len: valid.len(),
            });
        }
        Ok(Self {
            height,
            width,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    /// Valid wherever `grid` holds a finite, non-zero value.
    pub fn from_finite_nonzero(grid: &Grid2) -> Self {
        Self {
            height: grid.height(),
            width: grid.width(),
            valid: grid
                .values()
                .iter()
                .map(|v| v.is_finite() && *v != 0.0)
                .collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.valid[y * self.width + x] = valid;
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            valid: self
                .valid
                .iter()
                .zip(&other.valid)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut valid = Vec::with_capacity(self.valid.len());
        for y in 0..self.height {
            for x in 0..self.width {
                valid.push(self.is_valid(y, self.width - 1 - x));
            }
        }
        Mask {
            height: self.height,
            width: self.width,
            valid,
        }
    }

    pub fn check_shape(&self, grid: &Grid2) -> Result<()> {
        if self.shape() != grid.shape() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape(),
                actual: self.shape(),
            });
        }
        Ok(())
    }

    /// Values of `grid` at valid pixels, in row-major order.
    pub fn select(&self, grid: &Grid2) -> Result<Vec<f64>> {
        self.check_shape(grid)?;
        Ok(grid
            .values()
            .iter()
            .zip(&self.valid)
            .filter_map(|(v, ok)| ok.then_some(*v))
            .collect())
    }
}

/// Three grids of identical shape: an RGB image, a latent code, or a
/// replicated depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent3 {
    channels: [Grid2; 3],
}

impl Latent3 {
    pub fn new(c0: Grid2, c1: Grid2, c2: Grid2) -> Result<Self> {
        c0.ensure_shape(c1.shape())?;
        c0.ensure_shape(c2.shape())?;
        Ok(Self {
            channels: [c0, c1, c2],
        })
    }

    pub fn channels(&self) -> &[Grid2; 3] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &Grid2 {
        &self.channels[c]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn map_channels(&self, f: impl Fn(&Grid2) -> Grid2) -> Result<Self> {
        Self::new(
            f(&self.channels[0]),
            f(&self.channels[1]),
            f(&self.channels[2]),
        )
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            channels: [
                self.channels[0].flip_horizontal(),
                self.channels[1].flip_horizontal(),
                self.channels[2].flip_horizontal(),
            ],
        }
    }
}

/// RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(Latent3);

impl RgbImage {
    pub fn new(r: Grid2, g: Grid2, b: Grid2) -> Result<Self> {
        let stack = Latent3::new(r, g, b)?;
        for c in stack.channels() {
            if let Some(v) = c.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidRange(format!(
                    "rgb value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self(stack))
    }

    pub fn channels(&self) -> &[Grid2; 3] {
        self.0.channels()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn as_latent(&self) -> &Latent3 {
        &self.0
    }

    /// Maps `[0, 1]` colours to the `[-1, 1]` range expected by codecs.
    pub fn to_signed(&self) -> Latent3 {
        self.0
            .map_channels(|g| g.map(|v| v * 2.0 - 1.0))
            .expect("channels share shape")
    }

    pub fn flip_horizontal(&self) -> Self {
        Self(self.0.flip_horizontal())
    }
}

/// Value at fraction `q` of the sorted valid values, interpolating linearly
/// between the two closest ranks (`rank = q * (n - 1)`).
pub fn percentile(grid: &Grid2, mask: &Mask, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidRange(format!("percentile fraction {q}")));
    }
    let mut values = mask.select(grid)?;
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    values.sort_by(f64::total_cmp);
    Ok(percentile_of_sorted(&values, q))
}

pub(crate) fn percentile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Bilinear resampling with corner-aligned sample positions: output pixel
/// `(i, j)` reads input position `(i * (h - 1) / (new_h - 1), ...)`.
pub fn resize_bilinear(grid: &Grid2, new_h: usize, new_w: usize) -> Result<Grid2> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidShape {
            height: new_h,
            width: new_w,
            len: 0,
        });
    }
    if grid.shape() == (new_h, new_w) {
        return Ok(grid.clone());
    }
    let (h, w) = grid.shape();
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let pos = if n_out == 1 {
                    0.0
                } else {
                    i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                };
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(new_h, h);
    let xs = coords(new_w, w);
    let mut out = Vec::with_capacity(new_h * new_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bottom = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid2::new(new_h, new_w, out)
}
