//! DDIM inference and test-time ensembling of affine-invariant predictions.

use crate::denoiser::{Denoiser, DenoiserInput};
use crate::depthnorm::{average3, AvgPoolCodec, DepthCodec, IdentityCodec};
use crate::error::{Error, Result};
use crate::grids::{Grid2, Latent3, RgbImage};
use crate::mrnoise::{gaussian_noise, NoiseKind, NoiseSpec};
use crate::schedule::{ddim_step, respace, NoiseSchedule, TimestepPlan};

/// Ensemble regulariser weight used unless overridden.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `0.02 N / (N - 1)`: scales the regulariser with the number of pairs per
/// member. Small enough that the ensemble collapses whenever the members
/// disagree by more than this in RMS; kept for comparison runs.
pub fn pair_balanced_lambda(members: usize) -> f64 {
    0.02 * members as f64 / (members.max(2) - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecChoice {
    Identity,
    AvgPool(usize),
}

impl CodecChoice {
    pub fn build(&self) -> Result<Box<dyn DepthCodec>> {
        Ok(match self {
            Self::Identity => Box::new(IdentityCodec),
            Self::AvgPool(f) => Box::new(AvgPoolCodec::new(*f)?),
        })
    }
}

impl std::str::FromStr for CodecChoice {
    type Err = Error;

    /// `identity`, `avgpool` (factor 2) or `avgpool:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "identity" => Ok(Self::Identity),
            None if s == "avgpool" => Ok(Self::AvgPool(2)),
            Some(("avgpool", f)) => f
                .parse()
                .ok()
                .filter(|f| *f > 0)
                .map(Self::AvgPool)
                .ok_or_else(|| Error::InvalidRange(format!("bad pooling factor `{f}`"))),
            _ => Err(Error::InvalidRange(format!("unknown codec `{s}`"))),
        }
    }
}

impl std::fmt::Display for CodecChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::AvgPool(k) => write!(f, "avgpool:{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    NelderMead,
    /// Finite-difference subgradient descent with a diminishing step.
    Subgradient,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nelder_mead" => Ok(Self::NelderMead),
            "subgradient" => Ok(Self::Subgradient),
            other => Err(Error::InvalidRange(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NelderMead => "nelder_mead",
            Self::Subgradient => "subgradient",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub lambda: f64,
    pub max_evals: usize,
    pub tol: f64,
    pub optimizer: Optimizer,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            max_evals: 2000,
            tol: 1e-8,
            optimizer: Optimizer::NelderMead,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub steps: usize,
    pub ensemble: usize,
    pub init_noise: NoiseKind,
    pub seed: u64,
    pub codec: CodecChoice,
    pub align: AlignConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            ensemble: 10,
            init_noise: NoiseKind::Gaussian,
            seed: 0,
            codec: CodecChoice::Identity,
            align: AlignConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ensemble == 0 {
            return Err(Error::InvalidCount("steps and ensemble size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One prediction starting from plain Gaussian noise seeded by `noise_seed`.
/// The output is in the normalised `[-1, 1]` depth convention.
pub fn infer_once(
    image: &RgbImage,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    noise_seed: u64,
    codec: &dyn DepthCodec,
) -> Result<Grid2> {
    let (h, w) = codec.latent_shape(image.shape().0, image.shape().1);
    infer_from(image, model, sched, plan, gaussian_noise(h, w, noise_seed), codec)
}

/// As [`infer_once`] from an explicit initial latent.
pub fn infer_from(
    image: &RgbImage,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    init: Grid2,
    codec: &dyn DepthCodec,
) -> Result<Grid2> {
    Ok(average3(&infer_decoded(image, model, sched, plan, init, codec)?))
}

/// The three decoded depth channels before averaging.
pub fn infer_decoded(
    image: &RgbImage,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
    init: Grid2,
    codec: &dyn DepthCodec,
) -> Result<Latent3> {
    let (h, w) = image.shape();
    let image_latent = codec.encode(&image.to_signed());
    init.ensure_shape(image_latent.shape())?;
    let mut input = DenoiserInput::new(init, image_latent, plan.steps()[0])?;
    for (t, t_prev) in plan.transitions() {
        input.t = t;
        let eps = model.predict_eps(&input, sched)?;
        input.depth_latent = ddim_step(&input.depth_latent, &eps, t, t_prev, sched, 0.0)?;
    }
    Ok(codec.decode_depth(&input.depth_latent, h, w))
}

fn median_of(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

/// Pixel-wise median; even counts take the midpoint of the central pair.
pub fn pixelwise_median(members: &[Grid2]) -> Result<Grid2> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidCount("median of zero maps".into()))?;
    for m in members {
        m.ensure_shape(first.shape())?;
    }
    let mut buf = vec![0.0; members.len()];
    let values = (0..first.len())
        .map(|p| {
            for (b, m) in buf.iter_mut().zip(members) {
                *b = m.values()[p];
            }
            median_of(&mut buf)
        })
        .collect();
    Grid2::new(first.height(), first.width(), values)
}

/// Objective over already-transformed members: RMS pairwise distance
/// (pixel means) plus `lambda * (|min m| + |1 - max m|)` on the median `m`.
pub fn ensemble_objective(members: &[Grid2], lambda: f64) -> Result<f64> {
    if members.len() < 2 {
        return Err(Error::NeedTwoMembers(members.len()));
    }
    let ones = vec![(1.0, 0.0); members.len()];
    Aligner::new(members, lambda)?.objective(&ones)
}

struct Aligner<'a> {
    members: &'a [Grid2],
    lambda: f64,
    pairs: f64,
}

impl<'a> Aligner<'a> {
    fn new(members: &'a [Grid2], lambda: f64) -> Result<Self> {
        let shape = members[0].shape();
        for m in members {
            m.ensure_shape(shape)?;
        }
        let n = members.len() as f64;
        Ok(Self {
            members,
            lambda,
            pairs: n * (n - 1.0) / 2.0,
        })
    }

    fn objective(&self, st: &[(f64, f64)]) -> Result<f64> {
        let px = self.members[0].len();
        let mut buf = vec![0.0; self.members.len()];
        let (mut pair_sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for p in 0..px {
            for ((b, m), (s, t)) in buf.iter_mut().zip(self.members).zip(st) {
                *b = s * m.values()[p] + t;
            }
            for i in 0..buf.len() {
                for j in i + 1..buf.len() {
                    let d = buf[i] - buf[j];
                    pair_sum += d * d;
                }
            }
            let med = median_of(&mut buf);
            lo = lo.min(med);
            hi = hi.max(med);
        }
        let value = (pair_sum / self.pairs / px as f64).sqrt()
            + self.lambda * (lo.abs() + (1.0 - hi).abs());
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFiniteObjective)
        }
    }

    fn objective_flat(&self, x: &[f64]) -> Result<f64> {
        let st: Vec<(f64, f64)> = x.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        self.objective(&st)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSolution {
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
    pub merged: Grid2,
    pub initial_objective: f64,
    pub objective: f64,
    /// Best objective after each optimiser iteration.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

impl EnsembleSolution {
    pub fn aligned_members(&self, members: &[Grid2]) -> Vec<Grid2> {
        members
            .iter()
            .zip(self.scales.iter().zip(&self.shifts))
            .map(|(m, (s, t))| m.map(|v| s * v + t))
            .collect()
    }
}

/// `(s, t)` mapping a map's range onto `[0, 1]`; constant maps only shift.
pub fn min_max_params(map: &Grid2) -> (f64, f64) {
    let (lo, hi) = (map.min(), map.max());
    let s = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
    (s, -lo * s)
}

/// Jointly fits a scale and shift per member starting from min-max
/// normalisation, then merges by pixel-wise median. A single member is
/// returned min-max normalised.
pub fn ensemble_align(members: &[Grid2], cfg: &AlignConfig) -> Result<EnsembleSolution> {
    let first = members.first().ok_or(Error::NeedTwoMembers(0))?;
    for m in members {
        m.ensure_shape(first.shape())?;
        if let Some(v) = m.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v));
        }
    }
    let init: Vec<f64> = members
        .iter()
        .flat_map(|m| {
            let (s, t) = min_max_params(m);
            [s, t]
        })
        .collect();
    if members.len() == 1 {
        let merged = first.map(|v| init[0] * v + init[1]);
        return Ok(EnsembleSolution {
            scales: vec![init[0]],
            shifts: vec![init[1]],
            merged,
            initial_objective: 0.0,
            objective: 0.0,
            trace: Vec::new(),
            evaluations: 0,
        });
    }
    let aligner = Aligner::new(members, cfg.lambda)?;
    let f = |x: &[f64]| aligner.objective_flat(x);
    let initial_objective = f(&init)?;
    let result = match cfg.optimizer {
        Optimizer::NelderMead => nelder_mead(&f, &init, cfg.max_evals, cfg.tol)?,
        Optimizer::Subgradient => subgradient(&f, &init, cfg.max_evals, cfg.tol)?,
    };
    let (x, objective) = if result.value <= initial_objective {
        (result.x, result.value)
    } else {
        (init, initial_objective)
    };
    let scales: Vec<f64> = x.iter().step_by(2).copied().collect();
    let shifts: Vec<f64> = x.iter().skip(1).step_by(2).copied().collect();
    let aligned: Vec<Grid2> = members
        .iter()
        .zip(scales.iter().zip(&shifts))
        .map(|(m, (s, t))| m.map(|v| s * v + t))
        .collect();
    Ok(EnsembleSolution {
        merged: pixelwise_median(&aligned)?,
        scales,
        shifts,
        initial_objective,
        objective,
        trace: result.trace,
        evaluations: result.evaluations,
    })
}

struct Minimum {
    x: Vec<f64>,
    value: f64,
    trace: Vec<f64>,
    evaluations: usize,
}

/// Standard Nelder–Mead (reflection 1, expansion 2, contraction 0.5,
/// shrink 0.5), stopping when the simplex's value spread falls below `tol`
/// or after `max_evals` evaluations.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x0: &[f64],
    max_evals: usize,
    tol: f64,
) -> Result<Minimum> {
    let n = x0.len();
    let mut evals = 0;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evals)?));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1e-3 { 0.05 * x[i] } else { 0.05 };
        let v = eval(&x, &mut evals)?;
        simplex.push((x, v));
    }
    let mut trace = Vec::new();
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(simplex[0].1);
        if simplex[n].1 - simplex[0].1 <= tol {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + coef * (w - c))
                .collect()
        };
        let reflected = along(-1.0);
        let fr = eval(&reflected, &mut evals)?;
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = eval(&expanded, &mut evals)?;
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < simplex[n].1 {
                let c = along(-0.5);
                let v = eval(&c, &mut evals)?;
                (c, v)
            } else {
                let c = along(0.5);
                let v = eval(&c, &mut evals)?;
                (c, v)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best
                        .iter()
                        .zip(&vertex.0)
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    let v = eval(&x, &mut evals)?;
                    *vertex = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    trace.push(value);
    Ok(Minimum {
        x,
        value,
        trace,
        evaluations: evals,
    })
}

/// Normalised central-difference descent with step `0.05 / sqrt(k + 1)`,
/// keeping the best point seen.
fn subgradient(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x0: &[f64],
    max_evals: usize,
    tol: f64,
) -> Result<Minimum> {
    let n = x0.len();
    let h = 1e-6;
    let mut x = x0.to_vec();
    let mut best = (x.clone(), f(&x)?);
    let mut evals = 1;
    let mut trace = vec![best.1];
    let mut k = 0;
    while evals + 2 * n <= max_evals {
        let mut g = vec![0.0; n];
        for i in 0..n {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            g[i] = (f(&p)? - f(&m)?) / (2.0 * h);
        }
        evals += 2 * n;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            break;
        }
        let step = 0.05 / ((k + 1) as f64).sqrt();
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi / norm;
        }
        let v = f(&x)?;
        evals += 1;
        if v < best.1 {
            best = (x.clone(), v);
        }
        trace.push(best.1);
        k += 1;
    }
    Ok(Minimum {
        x: best.0,
        value: best.1,
        trace,
        evaluations: evals,
    })
}

/// Merged prediction of an ensemble run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// Median of the aligned members, roughly spanning `[0, 1]`.
    pub merged: Grid2,
    /// Per-pixel population standard deviation of the aligned members.
    pub spread: Option<Grid2>,
    /// Raw member predictions in the normalised convention.
    pub members: Vec<Grid2>,
    pub solution: EnsembleSolution,
}

/// Per-pixel population standard deviation across maps.
pub fn pixelwise_std(maps: &[Grid2]) -> Result<Grid2> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidCount("spread of zero maps".into()))?;
    for m in maps {
        m.ensure_shape(first.shape())?;
    }
    let n = maps.len() as f64;
    Ok(Grid2::from_fn(first.height(), first.width(), |y, x| {
        let mean = maps.iter().map(|m| m.get(y, x)).sum::<f64>() / n;
        (maps.iter().map(|m| (m.get(y, x) - mean).powi(2)).sum::<f64>() / n).sqrt()
    }))
}

/// Runs `cfg.ensemble` members with seeds `seed + i` and merges them.
pub fn infer_ensemble(
    image: &RgbImage,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &InferenceConfig,
) -> Result<EnsemblePrediction> {
    cfg.validate()?;
    let plan = respace(sched.steps(), cfg.steps)?;
    let codec = cfg.codec.build()?;
    let (h, w) = image.shape();
    let (lh, lw) = codec.latent_shape(h, w);
    let members = (0..cfg.ensemble as u64)
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            let init = match cfg.init_noise {
                NoiseKind::Gaussian => gaussian_noise(lh, lw, seed),
                kind => NoiseSpec {
                    kind,
                    seed,
                    ..NoiseSpec::default()
                }
                .sample(lh, lw, sched.steps(), sched.steps())?,
            };
            infer_from(image, model, sched, &plan, init, codec.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let solution = ensemble_align(&members, &cfg.align)?;
    let spread = if members.len() > 1 {
        Some(pixelwise_std(&solution.aligned_members(&members))?)
    } else {
        None
    };
    Ok(EnsemblePrediction {
        merged: solution.merged.clone(),
        spread,
        members,
        solution,
    })
}
