use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use depthdiff_core::data::{
    mixed_sampler, mixed_sampler_from, read_depth, read_manifest, read_rgb, write_depth,
    write_intrinsics, write_manifest, write_rgb, DepthFormat, ManifestEntry, MixSpec, Sample,
};
use depthdiff_core::denoiser::{
    load_checkpoint, save_checkpoint, write_loss_csv, Denoiser, GaussianDenoiser, ToyDenoiser,
    TrainExample,
};
use depthdiff_core::eval::evaluate;
use depthdiff_core::experiments::{
    encode_examples, evaluate_model, mean_std, train_toy, SceneResult,
};
use depthdiff_core::mrnoise::NoiseKind;
use depthdiff_core::pipeline::{infer_ensemble, InferenceConfig};
use depthdiff_core::rng::derive_seed;
use depthdiff_core::Error;
use thiserror::Error as ThisError;

use crate::config::RunConfig;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => match e {
                Error::Io(_)
                | Error::MalformedFile(_)
                | Error::UnsupportedFormat(_)
                | Error::InvalidShape { .. }
                | Error::ShapeMismatch { .. }
                | Error::EmptyMask
                | Error::NonPositiveGroundTruth(_)
                | Error::NonPositiveDepth(_) => 2,
                Error::DivergedLoss { .. }
                | Error::NonFiniteObjective
                | Error::SingularFit(_)
                | Error::NonFinite(_)
                | Error::DegenerateRange(_) => 3,
                Error::InvalidRange(_)
                | Error::InvalidCount(_)
                | Error::NonMonotoneSteps { .. }
                | Error::NotImplemented(_)
                | Error::NeedTwoMembers(_) => 1,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Reads a manifest, naming the file in I/O errors.
fn load_manifest(path: &Path) -> CliResult<Vec<ManifestEntry>> {
    read_manifest(path).map_err(|e| match e {
        Error::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

/// Renders `count` scenes into `out` and returns the manifest path.
pub fn gen_data(cfg: &RunConfig, count: usize, out: &Path) -> CliResult<PathBuf> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let samples = mixed_sampler(&cfg.mix(), count, cfg.data.height, cfg.data.width)?;
    create_dir(out)?;
    let format = cfg.data.depth_format.0;
    let ext = match format {
        DepthFormat::Pfm => "pfm",
        DepthFormat::Png16 => "png",
    };
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let rgb = PathBuf::from(format!("{id}_rgb.png"));
        let depth = PathBuf::from(format!("{id}_depth.{ext}"));
        write_rgb(&s.image, &out.join(&rgb))?;
        write_depth(&s.depth, &s.mask, &out.join(&depth), format)?;
        write_intrinsics(&s.intrinsics, &out.join(format!("{id}_cam.txt")))?;
        entries.push(ManifestEntry {
            id,
            rgb,
            depth,
            domain: s.domain,
        });
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> CliResult<()> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("{}: manifest is empty", manifest.display())));
    }
    let codec = cfg.inference.codec.build()?;
    let examples = entries
        .iter()
        .map(|e| {
            let image = read_rgb(&e.rgb)?;
            let (depth, mask) = read_depth(&e.depth)?;
            TrainExample::new(&image, &depth, &mask, codec.as_ref())
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let sched = cfg.schedule()?;
    let (model, losses) = train_toy(&examples, &sched, cfg.toy_config(), &cfg.train_config())?;
    create_dir(out)?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    write_loss_csv(&losses, &out.join("loss.csv"))?;
    Ok(())
}

fn load_model(cfg: &RunConfig, model: &str) -> CliResult<Box<dyn Denoiser>> {
    if model == "analytic" {
        return Ok(Box::new(GaussianDenoiser {
            mu: cfg.inference.analytic_mu,
            sigma: cfg.inference.analytic_sigma,
        }));
    }
    Ok(Box::new(load_checkpoint(Path::new(model))?))
}

/// Sample id of an image path: the file stem without a trailing `_rgb`.
fn sample_id(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.trim_end_matches("_rgb").to_string())
        .ok_or_else(|| CliError::Usage(format!("{}: no file name", path.display())))
}

pub fn infer(cfg: &RunConfig, model: &str, inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    for p in inputs {
        if !p.is_file() {
            return Err(CliError::Data(format!("{}: no such input", p.display())));
        }
    }
    let denoiser = load_model(cfg, model)?;
    let sched = cfg.schedule()?;
    let base = cfg.inference_config();
    let mut inputs = inputs.to_vec();
    inputs.sort();
    create_dir(out)?;
    for path in &inputs {
        let id = sample_id(path)?;
        let image = read_rgb(path)?;
        let icfg = InferenceConfig {
            seed: derive_seed(base.seed, &id, 0),
            ..base
        };
        let pred = infer_ensemble(&image, denoiser.as_ref(), &sched, &icfg)?;
        let (h, w) = pred.merged.shape();
        let mask = depthdiff_core::Mask::all_valid(h, w);
        write_depth(&pred.merged, &mask, &out.join(format!("{id}_pred.pfm")), DepthFormat::Pfm)?;
        if let Some(spread) = &pred.spread {
            write_depth(spread, &mask, &out.join(format!("{id}_spread.pfm")), DepthFormat::Pfm)?;
        }
    }
    Ok(())
}

/// One scored line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample: String,
    pub absrel: f64,
    pub delta1: f64,
    pub s: f64,
    pub t: f64,
    pub valid_px: usize,
}

fn score(cfg: &RunConfig, entry: &ManifestEntry, pred_path: &Path) -> Result<EvalRow, Error> {
    let (pred, pred_mask) = read_depth(pred_path)?;
    let (gt, gt_mask) = read_depth(&entry.depth)?;
    pred.ensure_shape(gt.shape())?;
    let mask = gt_mask.and(&pred_mask)?;
    let r = evaluate(&pred, &gt, &mask, cfg.eval.space)?;
    Ok(EvalRow {
        sample: entry.id.clone(),
        absrel: r.absrel,
        delta1: r.delta1,
        s: r.s,
        t: r.t,
        valid_px: r.valid_pixels,
    })
}

fn eval_line(out: &mut String, sample: &str, absrel: f64, delta1: f64, s: f64, t: f64, px: usize) {
    let _ = writeln!(
        out,
        "{sample},{:.1},{:.1},{s:.6},{t:.6},{px}",
        100.0 * absrel,
        100.0 * delta1
    );
}

/// Scores every manifest sample against `<id>_pred.pfm` in `pred_dir` and
/// writes `metrics.csv`. Failing samples get a `nan` row and a warning.
pub fn eval(cfg: &RunConfig, pred_dir: &Path, manifest: &Path, out: &Path) -> CliResult<Vec<EvalRow>> {
    let has_preds = fs::read_dir(pred_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", pred_dir.display())))?
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().ends_with("_pred.pfm"));
    if !has_preds {
        return Err(CliError::Data(format!("{}: no *_pred.pfm files", pred_dir.display())));
    }
    let mut entries = load_manifest(manifest)?;
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut csv = String::from("sample,absrel,delta1,s,t,valid_px\n");
    let mut rows = Vec::new();
    for e in &entries {
        match score(cfg, e, &pred_dir.join(format!("{}_pred.pfm", e.id))) {
            Ok(r) => {
                eval_line(&mut csv, &r.sample, r.absrel, r.delta1, r.s, r.t, r.valid_px);
                rows.push(r);
            }
            Err(err) => {
                eprintln!("warning: sample {}: {err}", e.id);
                let _ = writeln!(csv, "{},nan,nan,nan,nan,0", e.id);
            }
        }
    }
    if rows.is_empty() {
        let _ = writeln!(csv, "mean,nan,nan,nan,nan,0");
    } else {
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let px = rows.iter().map(|r| r.valid_px).sum();
        eval_line(
            &mut csv,
            "mean",
            mean(|r| r.absrel),
            mean(|r| r.delta1),
            mean(|r| r.s),
            mean(|r| r.t),
            px,
        );
    }
    create_dir(out)?;
    write_text(&out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AblateKind {
    EnsembleSize,
    Steps,
    Noise,
    MixRatio,
}

impl AblateKind {
    fn name(self) -> &'static str {
        match self {
            AblateKind::EnsembleSize => "ensemble_size",
            AblateKind::Steps => "steps",
            AblateKind::Noise => "noise",
            AblateKind::MixRatio => "mix_ratio",
        }
    }
}

pub const ENSEMBLE_SIZES: [usize; 5] = [1, 2, 5, 10, 20];
pub const STEP_COUNTS: [usize; 6] = [1, 2, 5, 10, 25, 50];
pub const NOISE_KINDS: [NoiseKind; 3] = [NoiseKind::Gaussian, NoiseKind::Multires, NoiseKind::Annealed];
pub const MIX_RATIOS: [f64; 5] = [1.0, 0.95, 0.9, 0.5, 0.0];

/// Per-run summary of one sweep point on one split.
#[derive(Debug, Clone, Copy)]
struct RunStats {
    absrel: f64,
    delta1: f64,
    spread: f64,
}

fn summarize(results: &[SceneResult]) -> RunStats {
    let n = results.len() as f64;
    RunStats {
        absrel: results.iter().map(|r| r.report.absrel).sum::<f64>() / n,
        delta1: results.iter().map(|r| r.report.delta1).sum::<f64>() / n,
        spread: results.iter().map(|r| r.spread).sum::<f64>() / n,
    }
}

struct Point {
    value: String,
    split: &'static str,
    runs: Vec<RunStats>,
}

struct RunData {
    train: Vec<Sample>,
    test: Vec<(&'static str, Vec<Sample>)>,
}

fn run_data(run_cfg: &RunConfig, split_domains: bool) -> CliResult<RunData> {
    let a = &run_cfg.ablate;
    let (h, w) = (run_cfg.data.height, run_cfg.data.width);
    let mix = run_cfg.mix();
    let start = a.train_scenes as u64;
    let train = mixed_sampler(&mix, a.train_scenes, h, w)?;
    let test = if split_domains {
        let split = |p_indoor| MixSpec { p_indoor, ..mix };
        vec![
            ("indoor", mixed_sampler_from(&split(1.0), start, a.test_scenes, h, w)?),
            ("outdoor", mixed_sampler_from(&split(0.0), start, a.test_scenes, h, w)?),
        ]
    } else {
        vec![("all", mixed_sampler_from(&mix, start, a.test_scenes, h, w)?)]
    };
    Ok(RunData { train, test })
}

fn train_on(run_cfg: &RunConfig, samples: &[Sample]) -> CliResult<ToyDenoiser> {
    let codec = run_cfg.inference.codec.build()?;
    let examples = encode_examples(samples, codec.as_ref())?;
    let sched = run_cfg.schedule()?;
    let (model, _) = train_toy(&examples, &sched, run_cfg.toy_config(), &run_cfg.train_config())?;
    Ok(model)
}

/// Runs a sweep with `ablate.runs` root seeds `seed, seed + 1, ...` and
/// writes `ablate_<which>.csv` with mean and sample std over runs.
pub fn ablate(cfg: &RunConfig, which: AblateKind, model: Option<&Path>, out: &Path) -> CliResult<()> {
    if cfg.ablate.runs == 0 {
        return Err(CliError::Usage("ablate.runs must be at least 1".into()));
    }
    if model.is_some() && matches!(which, AblateKind::Noise | AblateKind::MixRatio) {
        return Err(CliError::Usage(format!(
            "--model cannot be used with the {} sweep, which retrains per point",
            which.name()
        )));
    }
    let fixed = model.map(load_checkpoint).transpose()?;
    let sched = cfg.schedule()?;
    let mut points: Vec<Point> = Vec::new();
    let mut record = |value: String, split: &'static str, stats: RunStats| {
        match points.iter_mut().find(|p| p.value == value && p.split == split) {
            Some(p) => p.runs.push(stats),
            None => points.push(Point {
                value,
                split,
                runs: vec![stats],
            }),
        }
    };
    for r in 0..cfg.ablate.runs as u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(r);
        let icfg = run_cfg.inference_config();
        let space = run_cfg.eval.space;
        match which {
            AblateKind::EnsembleSize | AblateKind::Steps => {
                let data = run_data(&run_cfg, false)?;
                let trained;
                let m: &dyn Denoiser = match &fixed {
                    Some(m) => m,
                    None => {
                        trained = train_on(&run_cfg, &data.train)?;
                        &trained
                    }
                };
                let (split, test) = &data.test[0];
                let sweep: Vec<(String, InferenceConfig)> = if which == AblateKind::EnsembleSize {
                    ENSEMBLE_SIZES
                        .iter()
                        .map(|&n| (n.to_string(), InferenceConfig { ensemble: n, ..icfg }))
                        .collect()
                } else {
                    STEP_COUNTS
                        .iter()
                        .map(|&s| (s.to_string(), InferenceConfig { steps: s, ..icfg }))
                        .collect()
                };
                for (value, point_cfg) in sweep {
                    let results = evaluate_model(m, test, &sched, &point_cfg, space)?;
                    record(value, split, summarize(&results));
                }
            }
            AblateKind::Noise => {
                let data = run_data(&run_cfg, false)?;
                let (split, test) = &data.test[0];
                for kind in NOISE_KINDS {
                    let mut point_cfg = run_cfg.clone();
                    point_cfg.noise.kind = kind;
                    let m = train_on(&point_cfg, &data.train)?;
                    let results = evaluate_model(&m, test, &sched, &icfg, space)?;
                    record(kind.to_string(), split, summarize(&results));
                }
            }
            AblateKind::MixRatio => {
                for ratio in MIX_RATIOS {
                    let mut point_cfg = run_cfg.clone();
                    point_cfg.data.p_indoor = ratio;
                    let data = run_data(&point_cfg, true)?;
                    let m = train_on(&point_cfg, &data.train)?;
                    for (split, test) in &data.test {
                        let results = evaluate_model(&m, test, &sched, &icfg, space)?;
                        record(ratio.to_string(), split, summarize(&results));
                    }
                }
            }
        }
    }
    let mut csv = String::from(
        "sweep,value,split,absrel_mean,absrel_std,delta1_mean,delta1_std,spread_mean,runs\n",
    );
    for p in &points {
        let col = |f: fn(&RunStats) -> f64| mean_std(&p.runs.iter().map(f).collect::<Vec<_>>());
        let (am, asd) = col(|s| s.absrel);
        let (dm, dsd) = col(|s| s.delta1);
        let (sm, _) = col(|s| s.spread);
        let _ = writeln!(
            csv,
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.6},{}",
            which.name(),
            p.value,
            p.split,
            100.0 * am,
            100.0 * asd,
            100.0 * dm,
            100.0 * dsd,
            sm,
            p.runs.len()
        );
    }
    create_dir(out)?;
    write_text(&out.join(format!("ablate_{}.csv", which.name())), &csv)?;
    print!("{csv}");
    Ok(())
}
