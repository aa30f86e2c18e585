//! Affine-invariant depth normalisation and the three-channel codec
//! convention used to move depth in and out of latent space.

use crate::error::{Error, Result};
use crate::grids::{percentile, Grid2, Latent3, Mask};

/// Lower and upper percentiles that map to -1 and +1.
pub const LOW_PERCENTILE: f64 = 0.02;
pub const HIGH_PERCENTILE: f64 = 0.98;

const MIN_RANGE: f64 = 1e-9;

/// Depth rescaled so that its 2nd/98th percentiles sit at -1/+1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDepth {
    pub grid: Grid2,
    pub d2: f64,
    pub d98: f64,
}

/// Maps depth affinely so the valid 2% and 98% percentiles land on -1 and
/// +1. Values outside the percentile window are not clamped.
pub fn normalize_depth(depth: &Grid2, mask: &Mask) -> Result<NormalizedDepth> {
    let d2 = percentile(depth, mask, LOW_PERCENTILE)?;
    let d98 = percentile(depth, mask, HIGH_PERCENTILE)?;
    let range = d98 - d2;
    if !(range >= MIN_RANGE) {
        return Err(Error::DegenerateRange(range));
    }
    let grid = depth.map(|d| ((d - d2) / range - 0.5) * 2.0);
    Ok(NormalizedDepth { grid, d2, d98 })
}

/// Inverse of [`normalize_depth`].
pub fn denormalize_depth(n: &NormalizedDepth) -> Grid2 {
    let range = n.d98 - n.d2;
    n.grid.map(|v| (v * 0.5 + 0.5) * range + n.d2)
}

pub fn replicate3(depth: &Grid2) -> Latent3 {
    Latent3::new(depth.clone(), depth.clone(), depth.clone()).expect("identical shapes")
}

/// Pixel-wise channel mean, written relative to channel 0 so identical
/// channels average back to themselves exactly.
pub fn average3(latent: &Latent3) -> Grid2 {
    let [a, b, c] = latent.channels();
    Grid2::from_fn(a.height(), a.width(), |y, x| {
        let base = a.get(y, x);
        base + ((b.get(y, x) - base) + (c.get(y, x) - base)) / 3.0
    })
}

/// Mean per-pixel disagreement between the three channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpread {
    /// Mean of the per-pixel population standard deviation.
    pub std: f64,
    /// Mean of the per-pixel `max - min`.
    pub range: f64,
}

pub fn channel_consistency(latent: &Latent3) -> ChannelSpread {
    let [a, b, c] = latent.channels();
    let n = a.len() as f64;
    let mut std_sum = 0.0;
    let mut range_sum = 0.0;
    for ((&x0, &x1), &x2) in a.values().iter().zip(b.values()).zip(c.values()) {
        // offsets from x0 keep identical channels at exactly zero spread
        let (d1, d2) = (x1 - x0, x2 - x0);
        let m = (d1 + d2) / 3.0;
        let var = (m * m + (d1 - m).powi(2) + (d2 - m).powi(2)) / 3.0;
        std_sum += var.sqrt();
        range_sum += x0.max(x1).max(x2) - x0.min(x1).min(x2);
    }
    ChannelSpread {
        std: std_sum / n,
        range: range_sum / n,
    }
}

/// Encoder/decoder pair between three-channel images and latent codes.
///
/// Depth enters as three replicated channels and leaves as the average of
/// the three decoded channels.
pub trait DepthCodec: Send + Sync {
    fn name(&self) -> &'static str;

    /// Spatial latent size for an input of the given size.
    fn latent_shape(&self, height: usize, width: usize) -> (usize, usize);

    fn encode(&self, image: &Latent3) -> Latent3;

    fn decode(&self, latent: &Latent3, height: usize, width: usize) -> Latent3;

    /// Upper bound on the mean absolute round-trip error for normalised depth.
    fn roundtrip_bound(&self) -> f64;

    /// Single-channel depth latent: the encoded replicated map, averaged.
    fn encode_depth(&self, normalized: &Grid2) -> Grid2 {
        average3(&self.encode(&replicate3(normalized)))
    }

    fn decode_depth(&self, latent: &Grid2, height: usize, width: usize) -> Latent3 {
        self.decode(&replicate3(latent), height, width)
    }
}

/// Latent space equal to pixel space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl DepthCodec for IdentityCodec {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn latent_shape(&self, height: usize, width: usize) -> (usize, usize) {
        (height, width)
    }

    fn encode(&self, image: &Latent3) -> Latent3 {
        image.clone()
    }

    fn decode(&self, latent: &Latent3, _height: usize, _width: usize) -> Latent3 {
        latent.clone()
    }

    fn roundtrip_bound(&self) -> f64 {
        1e-12
    }
}

/// Lossy codec: `factor x factor` average pooling on encode, bilinear
/// upsampling on decode. Channel `c` pools on a grid shifted by
/// `c * factor / 3` pixels, so replicated inputs decode to slightly
/// different channels.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolCodec {
    factor: usize,
}

impl AvgPoolCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidCount("pooling factor must be >= 1".into()));
        }
        Ok(Self { factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    fn offset(&self, channel: usize) -> usize {
        channel * self.factor / 3
    }

    fn pool(&self, grid: &Grid2, offset: usize) -> Grid2 {
        let k = self.factor;
        let (h, w) = grid.shape();
        let (lh, lw) = self.latent_shape(h, w);
        let span = |i: usize, n: usize| {
            let start = (i * k).saturating_sub(offset);
            let end = (i * k + k).saturating_sub(offset).min(n);
            (start, end.max(start + 1))
        };
        Grid2::from_fn(lh, lw, |i, j| {
            let (y0, y1) = span(i, h);
            let (x0, x1) = span(j, w);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += grid.get(y, x);
                }
            }
            sum / ((y1 - y0) * (x1 - x0)) as f64
        })
    }

    fn upsample(&self, latent: &Grid2, offset: usize, height: usize, width: usize) -> Grid2 {
        let k = self.factor as f64;
        let (lh, lw) = latent.shape();
        let coord = |p: usize, n: usize| {
            let u = (p as f64 + offset as f64 - (k - 1.0) / 2.0) / k;
            let u = u.clamp(0.0, (n - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, u - lo as f64)
        };
        Grid2::from_fn(height, width, |y, x| {
            let (y0, y1, fy) = coord(y, lh);
            let (x0, x1, fx) = coord(x, lw);
            let top = latent.get(y0, x0) * (1.0 - fx) + latent.get(y0, x1) * fx;
            let bottom = latent.get(y1, x0) * (1.0 - fx) + latent.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }
}

impl DepthCodec for AvgPoolCodec {
    fn name(&self) -> &'static str {
        "avgpool"
    }

    fn latent_shape(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.factor), width.div_ceil(self.factor))
    }

    fn encode(&self, image: &Latent3) -> Latent3 {
        let [a, b, c] = image.channels();
        Latent3::new(
            self.pool(a, self.offset(0)),
            self.pool(b, self.offset(1)),
            self.pool(c, self.offset(2)),
        )
        .expect("pooled channels share shape")
    }

    fn decode(&self, latent: &Latent3, height: usize, width: usize) -> Latent3 {
        let [a, b, c] = latent.channels();
        Latent3::new(
            self.upsample(a, self.offset(0), height, width),
            self.upsample(b, self.offset(1), height, width),
            self.upsample(c, self.offset(2), height, width),
        )
        .expect("decoded channels share shape")
    }

    fn roundtrip_bound(&self) -> f64 {
        0.05 * self.factor as f64
    }
}
