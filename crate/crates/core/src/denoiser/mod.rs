//! Conditional denoisers: the input contract, an exact-noise oracle, the
//! closed-form Gaussian posterior denoiser and a small trainable conv net.

mod toy;
mod train;

pub use toy::{
    load_checkpoint, save_checkpoint, Activation, Block, ToyConfig, ToyDenoiser, ToyGradients,
};
pub use train::{
    train, train_with_noise, write_loss_csv, Adam, FlipAugment, NoiseSource, SpecNoise,
    TrainConfig, TrainExample,
};

use crate::error::{Error, Result};
use crate::grids::{Grid2, Latent3};
use crate::schedule::{convert_param, NoiseSchedule, Param};

/// Noisy depth latent, conditioning image latent and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub depth_latent: Grid2,
    pub image_latent: Latent3,
    pub t: usize,
}

impl DenoiserInput {
    pub fn new(depth_latent: Grid2, image_latent: Latent3, t: usize) -> Result<Self> {
        depth_latent.ensure_shape(image_latent.shape())?;
        Ok(Self {
            depth_latent,
            image_latent,
            t,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth_latent.shape()
    }
}

/// Stacks `[depth, R, G, B]` latents into a four-channel input.
pub fn concat_condition(depth_latent: &Grid2, image_latent: &Latent3) -> Result<[Grid2; 4]> {
    depth_latent.ensure_shape(image_latent.shape())?;
    let [r, g, b] = image_latent.channels();
    Ok([depth_latent.clone(), r.clone(), g.clone(), b.clone()])
}

/// The noise predictor `eps_theta(z_t, z_x, t)`.
pub trait Denoiser: Send + Sync {
    /// Parameterisation of [`Denoiser::predict`]'s output.
    fn parameterization(&self) -> Param;

    fn predict(&self, input: &DenoiserInput, sched: &NoiseSchedule) -> Result<Grid2>;

    fn predict_eps(&self, input: &DenoiserInput, sched: &NoiseSchedule) -> Result<Grid2> {
        let raw = self.predict(input, sched)?;
        convert_param(
            &raw,
            self.parameterization(),
            Param::Eps,
            input.t,
            &input.depth_latent,
            sched,
        )
    }
}

pub fn oracle_denoiser(_input: &DenoiserInput, true_eps: &Grid2) -> Grid2 {
    true_eps.clone()
}

/// Returns a fixed noise map regardless of input or step.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub eps: Grid2,
}

impl Denoiser for OracleDenoiser {
    fn parameterization(&self) -> Param {
        Param::Eps
    }

    fn predict(&self, input: &DenoiserInput, _sched: &NoiseSchedule) -> Result<Grid2> {
        self.eps.ensure_shape(input.shape())?;
        Ok(oracle_denoiser(input, &self.eps))
    }
}

/// Posterior-mean noise estimate for i.i.d. `d0 ~ N(mu, sigma^2)` pixels.
pub fn gaussian_analytic_denoiser(
    input: &DenoiserInput,
    mu: f64,
    sigma: f64,
    sched: &NoiseSchedule,
) -> Result<Grid2> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidRange(format!("sigma must be positive, got {sigma}")));
    }
    if input.t == 0 || input.t > sched.steps() {
        return Err(Error::InvalidRange(format!(
            "timestep {} outside 1..={}",
            input.t,
            sched.steps()
        )));
    }
    let ab = sched.alpha_bar(input.t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let var = sigma * sigma;
    let denom = ab * var + 1.0 - ab;
    Ok(input.depth_latent.map(|d| {
        let mu_post = (a * var * d + (1.0 - ab) * mu) / denom;
        (d - a * mu_post) / b
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDenoiser {
    pub mu: f64,
    pub sigma: f64,
}

impl Denoiser for GaussianDenoiser {
    fn parameterization(&self) -> Param {
        Param::Eps
    }

    fn predict(&self, input: &DenoiserInput, sched: &NoiseSchedule) -> Result<Grid2> {
        gaussian_analytic_denoiser(input, self.mu, self.sigma, sched)
    }
}

/// A `k x k` zero-padded convolution with bias, weights laid out as
/// `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidRange(format!("kernel size {kernel} must be odd")));
        }
        if weights.len() != out_channels * in_channels * kernel * kernel
            || bias.len() != out_channels
        {
            return Err(Error::InvalidCount("weight block size mismatch".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            weights,
            bias,
        })
    }

    /// Pre-activations for the given input channels.
    pub fn apply(&self, inputs: &[Grid2]) -> Result<Vec<Grid2>> {
        if inputs.len() != self.in_channels {
            return Err(Error::InvalidCount(format!(
                "layer expects {} channels, got {}",
                self.in_channels,
                inputs.len()
            )));
        }
        let (h, w) = inputs[0].shape();
        for g in inputs {
            g.ensure_shape((h, w))?;
        }
        let kk = self.kernel * self.kernel;
        let mut outs = Vec::with_capacity(self.out_channels);
        for o in 0..self.out_channels {
            let mut out = vec![self.bias[o]; h * w];
            for (i, input) in inputs.iter().enumerate() {
                let base = (o * self.in_channels + i) * kk;
                conv_accumulate(
                    input.values(),
                    h,
                    w,
                    &self.weights[base..base + kk],
                    self.kernel,
                    &mut out,
                );
            }
            outs.push(Grid2::new(h, w, out)?);
        }
        Ok(outs)
    }
}

/// Widens a layer to `2C` input channels by duplicating its weights along
/// the input axis and halving them, so a duplicated input reproduces the
/// original pre-activation.
pub fn duplicate_halve_init(layer: &ConvWeights) -> ConvWeights {
    let kk = layer.kernel * layer.kernel;
    let (c, k2) = (layer.in_channels, kk);
    let mut weights = Vec::with_capacity(layer.weights.len() * 2);
    for o in 0..layer.out_channels {
        let block = &layer.weights[o * c * k2..(o + 1) * c * k2];
        for _ in 0..2 {
            weights.extend(block.iter().map(|w| w / 2.0));
        }
    }
    ConvWeights {
        out_channels: layer.out_channels,
        in_channels: 2 * c,
        kernel: layer.kernel,
        weights,
        bias: layer.bias.clone(),
    }
}

/// Row/column range over which `src[y + d]` stays inside `0..n`.
#[inline]
pub(crate) fn valid_span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// `out[y, x] += sum_k w[k] * src[y + ky - r, x + kx - r]` with zero padding.
pub(crate) fn conv_accumulate(
    src: &[f64],
    h: usize,
    w: usize,
    kernel_weights: &[f64],
    k: usize,
    out: &mut [f64],
) {
    let r = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - r;
        let (y0, y1) = valid_span(h, dy);
        for kx in 0..k {
            let wt = kernel_weights[ky * k + kx];
            if wt == 0.0 {
                continue;
            }
            let dx = kx as isize - r;
            let (x0, x1) = valid_span(w, dx);
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let dst = &mut out[y * w + x0..y * w + x1];
                let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                for (o, v) in dst.iter_mut().zip(s) {
                    *o += wt * v;
                }
            }
        }
    }
}
