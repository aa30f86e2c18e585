//! Adam and the diffusion training loop.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::toy::{Block, ToyDenoiser, ToyGradients};
use super::DenoiserInput;
use crate::depthnorm::{normalize_depth, DepthCodec};
use crate::error::{Error, Result};
use crate::grids::{Grid2, Latent3, Mask, RgbImage};
use crate::mrnoise::NoiseSpec;
use crate::rng::{derive_seed, stream};
use crate::schedule::{NoiseSchedule, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAugment {
    Off,
    /// Image and depth flipped together with probability 0.5.
    Joint,
    /// Only the image is flipped; a deliberately broken control.
    ImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub objective: Param,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub flip: FlipAugment,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Blocks excluded from updates.
    pub frozen: [bool; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Param::V,
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            flip: FlipAugment::Joint,
            noise: NoiseSpec::default(),
            seed: 0,
            frozen: [false; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidCount(
                "iterations and batch size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        self.noise.validate()
    }

    fn frozen_blocks(&self) -> Vec<Block> {
        Block::ALL
            .into_iter()
            .zip(self.frozen)
            .filter_map(|(b, f)| f.then_some(b))
            .collect()
    }
}

/// Encoded training pair: signed image latent and normalised depth latent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image_latent: Latent3,
    pub depth_latent: Grid2,
}

impl TrainExample {
    pub fn new(image: &RgbImage, depth: &Grid2, mask: &Mask, codec: &dyn DepthCodec) -> Result<Self> {
        let normalized = normalize_depth(depth, mask)?;
        Ok(Self {
            image_latent: codec.encode(&image.to_signed()),
            depth_latent: codec.encode_depth(&normalized.grid),
        })
    }
}

/// Supplies the training noise for each draw.
pub trait NoiseSource {
    /// Noise for draw number `draw` at step `t` of `total`.
    fn sample(&mut self, height: usize, width: usize, t: usize, total: usize, draw: u64)
        -> Result<Grid2>;
}

/// Draws from a [`NoiseSpec`] with a per-draw derived seed.
#[derive(Debug, Clone, Copy)]
pub struct SpecNoise {
    pub spec: NoiseSpec,
}

impl NoiseSource for SpecNoise {
    fn sample(
        &mut self,
        height: usize,
        width: usize,
        t: usize,
        total: usize,
        draw: u64,
    ) -> Result<Grid2> {
        let seed = derive_seed(self.spec.seed, "train-noise", draw);
        self.spec.with_seed(seed).sample(height, width, t, total)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

pub fn train(
    model: &mut ToyDenoiser,
    data: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut noise = SpecNoise { spec: cfg.noise };
    train_with_noise(model, data, sched, cfg, &mut noise)
}

/// Minibatch Adam on the mean squared error between the model output and
/// the `eps` or `v` target. Returns the per-iteration mean batch loss.
pub fn train_with_noise(
    model: &mut ToyDenoiser,
    data: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidCount("training set is empty".into()));
    }
    if model.config().objective != cfg.objective {
        return Err(Error::InvalidRange(format!(
            "model objective {} differs from training objective {}",
            model.config().objective,
            cfg.objective
        )));
    }
    let total = sched.steps();
    let frozen = cfg.frozen_blocks();
    let mut rng = stream(cfg.seed, "train", 0);
    let mut adam = Adam::new(model.params().len(), cfg.learning_rate);
    let mut grads = ToyGradients(vec![0.0; model.params().len()]);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        grads.0.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for b in 0..cfg.batch_size {
            let ex = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=total);
            let flip = cfg.flip != FlipAugment::Off && rng.random_bool(0.5);
            let (h, w) = ex.depth_latent.shape();
            let eps = noise.sample(h, w, t, total, (iteration * cfg.batch_size + b) as u64)?;
            let (image, x0) = match (flip, cfg.flip) {
                (true, FlipAugment::Joint) => (
                    ex.image_latent.flip_horizontal(),
                    ex.depth_latent.flip_horizontal(),
                ),
                (true, FlipAugment::ImageOnly) => {
                    (ex.image_latent.flip_horizontal(), ex.depth_latent.clone())
                }
                _ => (ex.image_latent.clone(), ex.depth_latent.clone()),
            };
            let (a, s) = sched.coefficients(t);
            let d_t = x0.zip_map(&eps, |x, e| a * x + s * e)?;
            let target = match cfg.objective {
                Param::Eps => eps,
                Param::V => eps.zip_map(&x0, |e, x| a * e - s * x)?,
                Param::X0 => x0,
            };
            let input = DenoiserInput::new(d_t, image, t)?;
            let pred = model.forward(&input)?;
            let n = (pred.len() * cfg.batch_size) as f64;
            let diff = pred.zip_map(&target, |p, q| p - q)?;
            batch_loss += diff.values().iter().map(|d| d * d).sum::<f64>() / n;
            let g_out = diff.map(|d| 2.0 * d / n);
            model.accumulate_gradients(&input, &g_out, &frozen, &mut grads)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::DivergedLoss {
                iteration: iteration + 1,
                loss: batch_loss,
            });
        }
        losses.push(batch_loss);
        adam.step(model.params_mut(), &grads.0);
    }
    Ok(losses)
}

/// `iteration,loss` rows, iterations counted from 1.
pub fn write_loss_csv(losses: &[f64], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mixed_sampler, MixSpec};
    use crate::denoiser::ToyConfig;
    use crate::depthnorm::IdentityCodec;
    use crate::mrnoise::{multires_noise, NoiseKind};
    use crate::schedule::{make_schedule, BetaKind};

    fn sched() -> NoiseSchedule {
        make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap()
    }

    fn examples(n: usize, size: usize) -> Vec<TrainExample> {
        mixed_sampler(&MixSpec::default(), n, size, size)
            .unwrap()
            .iter()
            .map(|s| TrainExample::new(&s.image, &s.depth, &s.mask, &IdentityCodec).unwrap())
            .collect()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2, 0.01);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let data = examples(1, 16);
        let mut m = ToyDenoiser::new(ToyConfig::default(), 0).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut m, &data, &sched(), &cfg).is_err());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&mut m, &data, &sched(), &cfg).is_err());
        assert!(train(&mut m, &[], &sched(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_dataset_loss_decreases() {
        let zero = TrainExample {
            image_latent: Latent3::new(Grid2::zeros(8, 8), Grid2::zeros(8, 8), Grid2::zeros(8, 8))
                .unwrap(),
            depth_latent: Grid2::zeros(8, 8),
        };
        let cfg = TrainConfig {
            objective: Param::Eps,
            iterations: 100,
            batch_size: 8,
            learning_rate: 3e-4,
            flip: FlipAugment::Off,
            noise: NoiseSpec {
                kind: NoiseKind::Gaussian,
                ..NoiseSpec::default()
            },
            ..TrainConfig::default()
        };
        let mut m = ToyDenoiser::new(
            ToyConfig {
                objective: Param::Eps,
                ..ToyConfig::default()
            },
            1,
        )
        .unwrap();
        let losses = train(&mut m, &[zero], &sched(), &cfg).unwrap();
        assert_eq!(losses.len(), 100);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        // trailing-10 averages decrease from window to window
        let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        for pair in windows.windows(2) {
            assert!(pair[1] < pair[0], "{windows:?}");
        }
    }

    struct Recording {
        spec: NoiseSpec,
        calls: Vec<(usize, Vec<f64>)>,
    }

    impl NoiseSource for Recording {
        fn sample(&mut self, h: usize, w: usize, t: usize, total: usize, draw: u64) -> Result<Grid2> {
            let levels = self.spec.level_count(h, w);
            self.calls.push((t, self.spec.level_weights(levels, t, total)));
            let spec = self.spec.with_seed(derive_seed(self.spec.seed, "train-noise", draw));
            multires_noise(h, w, &spec, t, total)
        }
    }

    #[test]
    fn annealed_training_noise_uses_per_step_weights() {
        let data = examples(3, 16);
        let spec = NoiseSpec::default();
        let mut recorder = Recording {
            spec,
            calls: Vec::new(),
        };
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 3,
            noise: spec,
            ..TrainConfig::default()
        };
        let mut m = ToyDenoiser::new(ToyConfig::default(), 0).unwrap();
        let recorded = train_with_noise(&mut m, &data, &sched(), &cfg, &mut recorder).unwrap();
        assert_eq!(recorder.calls.len(), 15);
        for (t, weights) in &recorder.calls {
            assert_eq!(weights.len(), 4);
            for (i, w) in weights.iter().enumerate() {
                let expected = (0.9 * *t as f64 / 1000.0).powi(i as i32);
                assert!((w - expected).abs() < 1e-15);
            }
        }
        // the recorder draws the same noise as the default source
        let mut plain = ToyDenoiser::new(ToyConfig::default(), 0).unwrap();
        assert_eq!(train(&mut plain, &data, &sched(), &cfg).unwrap(), recorded);
        assert_eq!(plain, m);
    }

    #[test]
    fn diverging_run_is_reported() {
        let data = examples(2, 16);
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 2,
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        let mut m = ToyDenoiser::new(ToyConfig::default(), 0).unwrap();
        assert!(matches!(
            train(&mut m, &data, &sched(), &cfg),
            Err(Error::DivergedLoss { .. })
        ));
    }

    #[test]
    fn loss_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&[0.5, 0.25], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "iteration,loss\n1,0.5\n2,0.25\n");
    }
}
