//! Two-layer convolutional denoiser with a sinusoidal timestep bias and
//! hand-derived gradients.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{concat_condition, conv_accumulate, valid_span, ConvWeights, Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::grids::Grid2;
use crate::rng::stream;
use crate::schedule::{NoiseSchedule, Param};

const MAGIC: &[u8; 4] = b"MGLD";
const FORMAT_VERSION: u32 = 1;
const IN_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`.
    Silu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub emb_dim: usize,
    pub objective: Param,
    pub activation: Activation,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            kernel: 3,
            emb_dim: 16,
            objective: Param::V,
            activation: Activation::Silu,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(Error::InvalidCount(
                "hidden width must be >= 1 and the embedding size even".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidRange(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (f, kk, e) = (self.hidden, self.kernel * self.kernel, self.emb_dim);
        let w1 = 0;
        let b1 = w1 + f * IN_CHANNELS * kk;
        let wt = b1 + f;
        let w2 = wt + f * e;
        let b2 = w2 + f * kk;
        Layout {
            w1,
            b1,
            wt,
            w2,
            b2,
            len: b2 + 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    wt: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

/// Gradient blocks of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// First conv weights and bias.
    Conv1,
    /// Timestep-embedding projection.
    Time,
    /// Output conv weights and bias.
    Conv2,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Conv1, Block::Time, Block::Conv2];
}

/// `conv(4 -> F) + b1 + W_t emb(t)`, activation, `conv(F -> 1) + b2`. The
/// output is interpreted in the configured objective's parameterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ToyConfig,
    params: Vec<f64>,
}

/// Flat gradient vector with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradients(pub Vec<f64>);

struct Cache {
    h: usize,
    w: usize,
    input: [Grid2; 4],
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    emb: Vec<f64>,
}

/// Sinusoidal table: `sin(t w_j)` then `cos(t w_j)`, `w_j = 10000^(-2j/E)`.
pub(crate) fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |j: usize| (-(10000f64.ln()) * j as f64 / half as f64).exp();
    let mut e: Vec<f64> = (0..half).map(|j| (t as f64 * freq(j)).sin()).collect();
    e.extend((0..half).map(|j| (t as f64 * freq(j)).cos()));
    e
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ToyDenoiser {
    /// Scaled Gaussian initialisation, zero biases.
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.layout();
        let kk = (config.kernel * config.kernel) as f64;
        let mut rng = stream(seed, "toy-init", 0);
        let mut params = vec![0.0; l.len];
        let mut fill = |range: std::ops::Range<usize>, std: f64, p: &mut [f64]| {
            for v in &mut p[range] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(l.w1..l.b1, (2.0 / (IN_CHANNELS as f64 * kk)).sqrt(), &mut params);
        fill(l.wt..l.w2, 0.1, &mut params);
        fill(l.w2..l.b2, (1.0 / (config.hidden as f64 * kk)).sqrt(), &mut params);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ToyConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::InvalidCount(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        if let Some(v) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of a gradient block in the flat parameter vector.
    pub fn block_range(&self, block: Block) -> std::ops::Range<usize> {
        let l = self.config.layout();
        match block {
            Block::Conv1 => l.w1..l.wt,
            Block::Time => l.wt..l.w2,
            Block::Conv2 => l.w2..l.len,
        }
    }

    /// The first layer as a standalone conv block (without the time bias).
    pub fn first_layer(&self) -> ConvWeights {
        let l = self.config.layout();
        ConvWeights {
            out_channels: self.config.hidden,
            in_channels: IN_CHANNELS,
            kernel: self.config.kernel,
            weights: self.params[l.w1..l.b1].to_vec(),
            bias: self.params[l.b1..l.wt].to_vec(),
        }
    }

    fn run(&self, input: &DenoiserInput) -> Result<(Vec<f64>, Cache)> {
        let stack = concat_condition(&input.depth_latent, &input.image_latent)?;
        let (h, w) = input.shape();
        let (f, k) = (self.config.hidden, self.config.kernel);
        let kk = k * k;
        let l = self.config.layout();
        let p = &self.params;
        let emb = timestep_embedding(input.t, self.config.emb_dim);
        let mut pre = Vec::with_capacity(f);
        let mut act = Vec::with_capacity(f);
        let mut out = vec![p[l.b2]; h * w];
        for o in 0..f {
            let time_bias: f64 = p[l.wt + o * emb.len()..l.wt + (o + 1) * emb.len()]
                .iter()
                .zip(&emb)
                .map(|(a, b)| a * b)
                .sum();
            let mut z = vec![p[l.b1 + o] + time_bias; h * w];
            for (i, ch) in stack.iter().enumerate() {
                let base = l.w1 + (o * IN_CHANNELS + i) * kk;
                conv_accumulate(ch.values(), h, w, &p[base..base + kk], k, &mut z);
            }
            let a: Vec<f64> = match self.config.activation {
                Activation::Silu => z.iter().map(|v| v * sigmoid(*v)).collect(),
                Activation::Identity => z.clone(),
            };
            let base = l.w2 + o * kk;
            conv_accumulate(&a, h, w, &p[base..base + kk], k, &mut out);
            pre.push(z);
            act.push(a);
        }
        Ok((
            out,
            Cache {
                h,
                w,
                input: stack,
                pre,
                act,
                emb,
            },
        ))
    }

    /// Hidden pre-activations, one grid per channel.
    pub fn hidden_preactivations(&self, input: &DenoiserInput) -> Result<Vec<Grid2>> {
        let (_, cache) = self.run(input)?;
        let (h, w) = (cache.h, cache.w);
        cache.pre.into_iter().map(|z| Grid2::new(h, w, z)).collect()
    }

    pub fn forward(&self, input: &DenoiserInput) -> Result<Grid2> {
        let (h, w) = input.shape();
        let (out, _) = self.run(input)?;
        Grid2::new(h, w, out)
    }

    /// Forward pass plus gradients of `sum(grad_out * output)` with respect
    /// to every parameter; blocks listed in `frozen` get zero gradient.
    pub fn backward(
        &self,
        input: &DenoiserInput,
        grad_out: &Grid2,
        frozen: &[Block],
    ) -> Result<(Grid2, ToyGradients)> {
        let mut grads = ToyGradients(vec![0.0; self.params.len()]);
        let out = self.accumulate_gradients(input, grad_out, frozen, &mut grads)?;
        Ok((out, grads))
    }

    /// As [`ToyDenoiser::backward`], adding into an existing buffer.
    pub fn accumulate_gradients(
        &self,
        input: &DenoiserInput,
        grad_out: &Grid2,
        frozen: &[Block],
        grads: &mut ToyGradients,
    ) -> Result<Grid2> {
        grad_out.ensure_shape(input.shape())?;
        if grads.0.len() != self.params.len() {
            return Err(Error::InvalidCount("gradient buffer size mismatch".into()));
        }
        let (out, cache) = self.run(input)?;
        let (h, w) = (cache.h, cache.w);
        let (f, k) = (self.config.hidden, self.config.kernel);
        let kk = k * k;
        let r = (k / 2) as isize;
        let l = self.config.layout();
        let g = grad_out.values();
        let p = &self.params;
        let gr = &mut grads.0;
        let need_conv1 = !frozen.contains(&Block::Conv1);
        let need_time = !frozen.contains(&Block::Time);
        let need_conv2 = !frozen.contains(&Block::Conv2);

        if need_conv2 {
            gr[l.b2] += g.iter().sum::<f64>();
        }
        for o in 0..f {
            // d act[y + dy, x + dx] += w2 * g[y, x]; dw2 = sum g[y, x] act[y + dy, x + dx]
            let mut d_act = vec![0.0; h * w];
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = valid_span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let (x0, x1) = valid_span(w, dx);
                    let widx = l.w2 + o * kk + ky * k + kx;
                    let wt = p[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let gs = &g[y * w + x0..y * w + x1];
                        let a = &cache.act[o][sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        let da = &mut d_act[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for ((gv, av), dv) in gs.iter().zip(a).zip(da.iter_mut()) {
                            acc += gv * av;
                            *dv += wt * gv;
                        }
                    }
                    if need_conv2 {
                        gr[widx] += acc;
                    }
                }
            }
            if !(need_conv1 || need_time) {
                continue;
            }
            let d_pre: Vec<f64> = match self.config.activation {
                Activation::Silu => d_act
                    .iter()
                    .zip(&cache.pre[o])
                    .map(|(d, z)| {
                        let s = sigmoid(*z);
                        d * s * (1.0 + z * (1.0 - s))
                    })
                    .collect(),
                Activation::Identity => d_act,
            };
            let d_bias: f64 = d_pre.iter().sum();
            if need_time {
                let e = cache.emb.len();
                for (j, ev) in cache.emb.iter().enumerate() {
                    gr[l.wt + o * e + j] += d_bias * ev;
                }
            }
            if !need_conv1 {
                continue;
            }
            gr[l.b1 + o] += d_bias;
            for (i, ch) in cache.input.iter().enumerate() {
                let src = ch.values();
                for ky in 0..k {
                    let dy = ky as isize - r;
                    let (y0, y1) = valid_span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - r;
                        let (x0, x1) = valid_span(w, dx);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let dz = &d_pre[y * w + x0..y * w + x1];
                            let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            acc += dz.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gr[l.w1 + (o * IN_CHANNELS + i) * kk + ky * k + kx] += acc;
                    }
                }
            }
        }
        Grid2::new(h, w, out)
    }
}

impl Denoiser for ToyDenoiser {
    fn parameterization(&self) -> Param {
        self.config.objective
    }

    fn predict(&self, input: &DenoiserInput, _sched: &NoiseSchedule) -> Result<Grid2> {
        self.forward(input)
    }
}

fn param_code(p: Param) -> u8 {
    match p {
        Param::Eps => 0,
        Param::V => 1,
        Param::X0 => 2,
    }
}

/// Writes `MGLD`, a `u32` version, the shape header and little-endian `f32`
/// weights.
pub fn save_checkpoint(model: &ToyDenoiser, path: &Path) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::with_capacity(32 + model.params.len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        IN_CHANNELS as u32,
        c.hidden as u32,
        c.kernel as u32,
        c.emb_dim as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(param_code(c.objective));
    buf.push(match c.activation {
        Activation::Silu => 0,
        Activation::Identity => 1,
    });
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for v in &model.params {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::MalformedFile(format!("{}: {what}", path.display()));
    if bytes.len() < 30 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if u32_at(4) != FORMAT_VERSION as usize {
        return Err(Error::UnsupportedFormat(format!("checkpoint version {}", u32_at(4))));
    }
    if u32_at(8) != IN_CHANNELS {
        return Err(bad("input channel count must be 4"));
    }
    let objective = match bytes[24] {
        0 => Param::Eps,
        1 => Param::V,
        2 => Param::X0,
        _ => return Err(bad("unknown objective")),
    };
    let activation = match bytes[25] {
        0 => Activation::Silu,
        1 => Activation::Identity,
        _ => return Err(bad("unknown activation")),
    };
    let config = ToyConfig {
        hidden: u32_at(12),
        kernel: u32_at(16),
        emb_dim: u32_at(20),
        objective,
        activation,
    };
    config.validate()?;
    let count = u32_at(26);
    if count != config.param_count() || bytes.len() != 30 + 4 * count {
        return Err(bad("weight count does not match header"));
    }
    let params = bytes[30..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ToyDenoiser::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::Latent3;
    use crate::mrnoise::gaussian_noise;
    use rand::SeedableRng;

    fn input(h: usize, w: usize, seed: u64, t: usize) -> DenoiserInput {
        let img = Latent3::new(
            gaussian_noise(h, w, seed + 1),
            gaussian_noise(h, w, seed + 2),
            gaussian_noise(h, w, seed + 3),
        )
        .unwrap();
        DenoiserInput::new(gaussian_noise(h, w, seed), img, t).unwrap()
    }

    fn small_config() -> ToyConfig {
        ToyConfig {
            hidden: 4,
            kernel: 3,
            emb_dim: 6,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let c = ToyConfig::default();
        let m = ToyDenoiser::from_params(c, vec![0.0; c.param_count()]).unwrap();
        let out = m.forward(&input(6, 5, 0, 10)).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_first_layer_doubles_preactivations() {
        let c = ToyConfig {
            activation: Activation::Identity,
            ..small_config()
        };
        let m = ToyDenoiser::new(c, 3).unwrap();
        let mut doubled = m.clone();
        for i in m.block_range(Block::Conv1).chain(m.block_range(Block::Time)) {
            doubled.params_mut()[i] *= 2.0;
        }
        let x = input(5, 7, 1, 300);
        let a = m.hidden_preactivations(&x).unwrap();
        let b = doubled.hidden_preactivations(&x).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            for (u, v) in ga.values().iter().zip(gb.values()) {
                assert!((2.0 * u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_layer_matches_conv_weights() {
        let m = ToyDenoiser::new(small_config(), 8).unwrap();
        let x = input(4, 6, 5, 0);
        // at t = 0 the embedding is (0, .., 0, 1, .., 1)
        let emb = timestep_embedding(0, 6);
        assert_eq!(emb, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let l = m.config().layout();
        let stack = concat_condition(&x.depth_latent, &x.image_latent).unwrap();
        let plain = m.first_layer().apply(&stack).unwrap();
        let pre = m.hidden_preactivations(&x).unwrap();
        for o in 0..4 {
            let tb: f64 = m.params()[l.wt + o * 6 + 3..l.wt + o * 6 + 6].iter().sum();
            for (u, v) in plain[o].values().iter().zip(pre[o].values()) {
                assert!((u + tb - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = ToyDenoiser::new(ToyConfig::default(), 11).unwrap();
        let b = ToyDenoiser::new(ToyConfig::default(), 11).unwrap();
        let x = input(8, 8, 2, 500);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let m = ToyDenoiser::new(small_config(), 1).unwrap();
        let x = input(5, 5, 0, 42);
        let (_, g) = m.backward(&x, &Grid2::zeros(5, 5), &[]).unwrap();
        assert!(g.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_block_has_zero_gradient() {
        let m = ToyDenoiser::new(small_config(), 1).unwrap();
        let x = input(5, 5, 0, 42);
        let g_out = gaussian_noise(5, 5, 77);
        for block in Block::ALL {
            let (_, g) = m.backward(&x, &g_out, &[block]).unwrap();
            assert!(g.0[m.block_range(block)].iter().all(|v| *v == 0.0));
            let (_, full) = m.backward(&x, &g_out, &[]).unwrap();
            for other in Block::ALL.into_iter().filter(|b| *b != block) {
                assert_eq!(&g.0[m.block_range(other)], &full.0[m.block_range(other)]);
            }
        }
    }

    fn loss(m: &ToyDenoiser, x: &DenoiserInput, target: &Grid2) -> f64 {
        let out = m.forward(x).unwrap();
        out.values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        for activation in [Activation::Silu, Activation::Identity] {
            let c = ToyConfig {
                activation,
                ..small_config()
            };
            let m = ToyDenoiser::new(c, 5).unwrap();
            let x = input(6, 7, 9, 137);
            let target = gaussian_noise(6, 7, 31);
            let out = m.forward(&x).unwrap();
            let g_out = out.zip_map(&target, |a, b| 2.0 * (a - b)).unwrap();
            let (_, grads) = m.backward(&x, &g_out, &[]).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
            for block in Block::ALL {
                let range = m.block_range(block);
                for _ in 0..25 {
                    let i = rng.random_range(range.clone());
                    let step = 1e-5;
                    let mut plus = m.clone();
                    plus.params_mut()[i] += step;
                    let mut minus = m.clone();
                    minus.params_mut()[i] -= step;
                    let fd = (loss(&plus, &x, &target) - loss(&minus, &x, &target)) / (2.0 * step);
                    let an = grads.0[i];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{block:?}[{i}]: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = ToyDenoiser::new(small_config(), 2).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MGLD");
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedFile(_))));
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedFile(_))));
    }
}
