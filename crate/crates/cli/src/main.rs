//! `depthdiff`: generate toy RGB-D data, train the toy denoiser, run
//! ensemble inference, evaluate and sweep ablations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthdiff_core::eval::AlignSpace;
use depthdiff_core::mrnoise::NoiseKind;
use depthdiff_core::pipeline::CodecChoice;

use crate::commands::{AblateKind, CliError};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "depthdiff", version, about = "Diffusion-based affine-invariant depth estimation on toy scenes")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the config file, which overrides built-in defaults.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration [default: built-in defaults]
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed of every random stream [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Inference denoising steps [default: 50]
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Ensemble size [default: 10]
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    /// Training noise: gaussian|multires|annealed [default: annealed]
    #[arg(long, global = true)]
    noise: Option<NoiseKind>,
    /// Probability of drawing an indoor scene [default: 0.9]
    #[arg(long = "mix-ratio", global = true)]
    mix_ratio: Option<f64>,
    /// Depth codec: identity|avgpool[:k] [default: identity]
    #[arg(long, global = true)]
    codec: Option<CodecChoice>,
    /// Alignment space for evaluation: depth|disparity [default: depth]
    #[arg(long, global = true)]
    space: Option<AlignSpace>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render toy scenes and write images, depth maps, intrinsics and a manifest
    GenData {
        /// Number of scenes
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train the toy denoiser on a manifest; writes model.ckpt and loss.csv
    Train {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
    /// Predict depth for RGB images; writes <id>_pred.pfm (and <id>_spread.pfm when ensembling)
    Infer {
        /// Checkpoint path, or `analytic` for the closed-form Gaussian denoiser
        #[arg(long, value_name = "CKPT|analytic")]
        model: String,
        #[arg(required = true, value_name = "IMAGE")]
        inputs: Vec<PathBuf>,
    },
    /// Score a prediction directory against a manifest; writes metrics.csv
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
    /// Run a parameter sweep on generated scenes; writes ablate_<which>.csv
    Ablate {
        #[arg(value_enum)]
        which: AblateKind,
        /// Reuse a trained checkpoint (ensemble_size and steps sweeps only)
        #[arg(long, value_name = "CKPT")]
        model: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML
    DumpConfig,
}

fn load_config(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.out {
        cfg.paths.out = v.display().to_string();
    }
    if let Some(v) = o.steps {
        cfg.inference.steps = v;
    }
    if let Some(v) = o.ensemble {
        cfg.inference.ensemble = v;
    }
    if let Some(v) = o.noise {
        cfg.noise.kind = v;
    }
    if let Some(v) = o.mix_ratio {
        cfg.data.p_indoor = v;
    }
    if let Some(v) = o.codec {
        cfg.inference.codec = v;
    }
    if let Some(v) = o.space {
        cfg.eval.space = v;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.overrides)?;
    let out = PathBuf::from(&cfg.paths.out);
    match cli.command {
        Command::GenData { count } => commands::gen_data(&cfg, count, &out).map(|_| ()),
        Command::Train { manifest } => commands::train(&cfg, &manifest, &out),
        Command::Infer { model, inputs } => commands::infer(&cfg, &model, &inputs, &out),
        Command::Eval { pred, manifest } => commands::eval(&cfg, &pred, &manifest, &out).map(|_| ()),
        Command::Ablate { which, model } => commands::ablate(&cfg, which, model.as_deref(), &out),
        Command::DumpConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
