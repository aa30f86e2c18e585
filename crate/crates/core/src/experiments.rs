//! Reproducible toy experiments shared by the CLI ablations and the
//! acceptance suite: train on generated scenes, infer on held-out scenes,
//! score against ground truth.

use crate::data::{mixed_sampler, mixed_sampler_from, MixSpec, Sample};
use crate::denoiser::{train, Denoiser, ToyConfig, ToyDenoiser, TrainConfig, TrainExample};
use crate::depthnorm::DepthCodec;
use crate::error::{Error, Result};
use crate::eval::{absrel, evaluate, AlignSpace, MetricReport};
use crate::grids::{percentile, Grid2};
use crate::pipeline::{infer_ensemble, pixelwise_std, InferenceConfig};
use crate::schedule::{make_schedule, BetaKind, NoiseSchedule};

/// Default training schedule: scaled-linear betas over 1000 steps.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).expect("valid constants")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTask {
    pub size: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub mix: MixSpec,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            size: 64,
            train_scenes: 200,
            test_scenes: 50,
            mix: MixSpec::default(),
        }
    }
}

impl ToyTask {
    pub fn train_samples(&self) -> Result<Vec<Sample>> {
        mixed_sampler(&self.mix, self.train_scenes, self.size, self.size)
    }

    /// Scenes drawn after the training range of the same sequence.
    pub fn test_samples(&self) -> Result<Vec<Sample>> {
        mixed_sampler_from(
            &self.mix,
            self.train_scenes as u64,
            self.test_scenes,
            self.size,
            self.size,
        )
    }
}

pub fn encode_examples(samples: &[Sample], codec: &dyn DepthCodec) -> Result<Vec<TrainExample>> {
    samples
        .iter()
        .map(|s| TrainExample::new(&s.image, &s.depth, &s.mask, codec))
        .collect()
}

/// Trains a freshly initialised toy model (seeded by `cfg.seed`).
pub fn train_toy(
    examples: &[TrainExample],
    sched: &NoiseSchedule,
    model_cfg: ToyConfig,
    cfg: &TrainConfig,
) -> Result<(ToyDenoiser, Vec<f64>)> {
    let mut model = ToyDenoiser::new(model_cfg, cfg.seed)?;
    let losses = train(&mut model, examples, sched, cfg)?;
    Ok((model, losses))
}

/// Mean AbsRel of predicting every pixel with the scene's median depth.
pub fn constant_median_absrel(samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let median = percentile(&s.depth, &s.mask, 0.5)?;
        let pred = Grid2::filled(s.depth.height(), s.depth.width(), median);
        total += absrel(&pred, &s.depth, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub report: MetricReport,
    /// Mean per-pixel std of the aligned ensemble members.
    pub spread: f64,
    /// Mean per-pixel std of the raw member predictions.
    pub raw_std: f64,
    /// Mean per-pixel max - min of the raw member predictions.
    pub raw_range: f64,
}

/// Mean per-pixel std and max - min across raw predictions of one input.
pub fn prediction_consistency(members: &[Grid2]) -> Result<(f64, f64)> {
    let std = pixelwise_std(members)?.mean();
    let first = &members[0];
    let mut range = 0.0;
    for p in 0..first.len() {
        let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            (lo.min(m.values()[p]), hi.max(m.values()[p]))
        });
        range += hi - lo;
    }
    Ok((std, range / first.len() as f64))
}

pub fn evaluate_model(
    model: &dyn Denoiser,
    samples: &[Sample],
    sched: &NoiseSchedule,
    cfg: &InferenceConfig,
    space: AlignSpace,
) -> Result<Vec<SceneResult>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let scene_cfg = InferenceConfig {
                seed: cfg.seed.wrapping_add(1000 * i as u64),
                ..*cfg
            };
            let out = infer_ensemble(&s.image, model, sched, &scene_cfg)?;
            let report = evaluate(&out.merged, &s.depth, &s.mask, space)?;
            let spread = out.spread.map_or(0.0, |g| g.mean());
            let (raw_std, raw_range) = prediction_consistency(&out.members)?;
            Ok(SceneResult {
                report,
                spread,
                raw_std,
                raw_range,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn mean_absrel(results: &[SceneResult]) -> f64 {
    mean_std(&results.iter().map(|r| r.report.absrel).collect::<Vec<_>>()).0
}

pub fn require_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidCount(format!("no {what}")));
    }
    Ok(())
}
