//! Run configuration: a TOML file whose every key has a default. Unknown
//! keys are rejected.

use std::fmt::Display;
use std::str::FromStr;

use depthdiff_core::data::{DepthFormat, MixSpec};
use depthdiff_core::denoiser::{Activation, FlipAugment, ToyConfig, TrainConfig};
use depthdiff_core::eval::AlignSpace;
use depthdiff_core::mrnoise::{NoiseKind, NoiseSpec};
use depthdiff_core::pipeline::{AlignConfig, CodecChoice, InferenceConfig, Optimizer};
use depthdiff_core::rng::derive_seed;
use depthdiff_core::schedule::{make_schedule, BetaKind, NoiseSchedule, Param};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Serde adapter for types with `Display` + `FromStr`.
mod text {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flip(pub FlipAugment);

impl FromStr for Flip {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(Flip(FlipAugment::Off)),
            "joint" => Ok(Flip(FlipAugment::Joint)),
            "image_only" => Ok(Flip(FlipAugment::ImageOnly)),
            other => Err(format!("unknown flip mode `{other}` (off|joint|image_only)")),
        }
    }
}

impl Display for Flip {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            FlipAugment::Off => "off",
            FlipAugment::Joint => "joint",
            FlipAugment::ImageOnly => "image_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Act(pub Activation);

impl FromStr for Act {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "silu" => Ok(Act(Activation::Silu)),
            "identity" => Ok(Act(Activation::Identity)),
            other => Err(format!("unknown activation `{other}` (silu|identity)")),
        }
    }
}

impl Display for Act {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Format(pub DepthFormat);

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pfm" => Ok(Format(DepthFormat::Pfm)),
            "png16" => Ok(Format(DepthFormat::Png16)),
            other => Err(format!("unknown depth format `{other}` (pfm|png16)")),
        }
    }
}

impl Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            DepthFormat::Pfm => "pfm",
            DepthFormat::Png16 => "png16",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(with = "text")]
    pub kind: BetaKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: BetaKind::ScaledLinear,
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(with = "text")]
    pub kind: NoiseKind,
    pub strength: f64,
    /// Omitted means every full octave of the grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseSpec::default();
        Self {
            kind: d.kind,
            strength: d.strength,
            levels: d.levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(with = "text")]
    pub objective: Param,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(with = "text")]
    pub flip: Flip,
    pub hidden: usize,
    pub kernel: usize,
    pub emb_dim: usize,
    #[serde(with = "text")]
    pub activation: Act,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ToyConfig::default();
        Self {
            objective: t.objective,
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            flip: Flip(t.flip),
            hidden: m.hidden,
            kernel: m.kernel,
            emb_dim: m.emb_dim,
            activation: Act(m.activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub steps: usize,
    pub ensemble: usize,
    #[serde(with = "text")]
    pub init_noise: NoiseKind,
    #[serde(with = "text")]
    pub codec: CodecChoice,
    pub lambda: f64,
    pub max_evals: usize,
    pub tol: f64,
    #[serde(with = "text")]
    pub optimizer: Optimizer,
    /// Target mean and std of the analytic Gaussian denoiser.
    pub analytic_mu: f64,
    pub analytic_sigma: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let i = InferenceConfig::default();
        Self {
            steps: i.steps,
            ensemble: i.ensemble,
            init_noise: i.init_noise,
            codec: i.codec,
            lambda: i.align.lambda,
            max_evals: i.align.max_evals,
            tol: i.align.tol,
            optimizer: i.align.optimizer,
            analytic_mu: 0.0,
            analytic_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub p_indoor: f64,
    pub height: usize,
    pub width: usize,
    #[serde(with = "text")]
    pub depth_format: Format,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            p_indoor: MixSpec::default().p_indoor,
            height: 64,
            width: 64,
            depth_format: Format(DepthFormat::Pfm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(with = "text")]
    pub space: AlignSpace,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            space: AlignSpace::Depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Independent runs per sweep point.
    pub runs: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 20,
            runs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub noise: NoiseSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Seed of a named sub-stream of the root seed.
    pub fn stream_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name, 0)
    }

    pub fn schedule(&self) -> depthdiff_core::Result<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.kind, s.steps, s.beta_start, s.beta_end)
    }

    pub fn mix(&self) -> MixSpec {
        MixSpec {
            p_indoor: self.data.p_indoor,
            seed: self.stream_seed("data"),
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.noise.kind,
            strength: self.noise.strength,
            levels: self.noise.levels,
            seed: self.stream_seed("train-noise"),
        }
    }

    pub fn toy_config(&self) -> ToyConfig {
        let t = &self.train;
        ToyConfig {
            hidden: t.hidden,
            kernel: t.kernel,
            emb_dim: t.emb_dim,
            objective: t.objective,
            activation: t.activation.0,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            objective: t.objective,
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            flip: t.flip.0,
            noise: self.noise_spec(),
            seed: self.stream_seed("train"),
            frozen: [false; 3],
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        let i = &self.inference;
        InferenceConfig {
            steps: i.steps,
            ensemble: i.ensemble,
            init_noise: i.init_noise,
            seed: self.stream_seed("infer"),
            codec: i.codec,
            align: AlignConfig {
                lambda: i.lambda,
                max_evals: i.max_evals,
                tol: i.tol,
                optimizer: i.optimizer,
            },
        }
    }
}
