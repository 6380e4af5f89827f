use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anfc_core::codec::{decode_image, encode_image, DecodeOptions, EncodeOptions};
use anfc_core::config::{EntropyMode, RunConfig, TrainConfig};
use anfc_core::eval::{load_dataset, rd_sweep, visualize_steps, ModelSet, Quality, Sweep};
use anfc_core::image_io::{read_png, write_png};
use anfc_core::metrics::bd_rate;
use anfc_core::model::Model;
use anfc_core::train::{finetune_for_rate, train, ImageSet};
use anfc_core::DType;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "anfc",
    version,
    about = "Learned image codec built on augmented normalizing flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML with [model] and [train] tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every output.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gmm,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of PNG training images (overrides the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Number of autoencoding transforms.
        #[arg(long)]
        num_steps: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also train the residual scale head.
        #[arg(long, value_enum)]
        residual: Option<Switch>,
    },
    /// Re-optimize a checkpoint for another rate point.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compress a PNG into a container file.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "off")]
        residual: Switch,
        #[arg(long)]
        lambda_index: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Decompress a container file into a PNG.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Skip quality enhancement.
        #[arg(long)]
        bypass_qe: bool,
    },
    /// Rate-distortion sweep over a PNG directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// One checkpoint per rate point, or one variable-rate checkpoint.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// Rate point of each fixed-rate checkpoint, in the same order.
        #[arg(long)]
        lambda: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "off")]
        residual: Switch,
    },
    /// BD-rate between two sweeps.
    Bdrate {
        #[command(flatten)]
        common: Common,
        /// `sweep.json` of the codec under test.
        #[arg(long)]
        test: PathBuf,
        /// `sweep.json` of the anchor.
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long, value_enum, default_value = "psnr")]
        metric: Metric,
    },
    /// Per-step transform outputs, spectra and latent heatmaps.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lambda_index: Option<usize>,
    },
    /// Run the invariant suite on a fresh model.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Psnr,
    Msssim,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path, DType::F32).with_context(|| format!("loading {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn training_data(cli: Option<&PathBuf>, cfg: &RunConfig) -> Result<ImageSet> {
    let dir = cli
        .or(cfg.data.as_ref())
        .context("no training data: pass --data or set `data` in the config")?;
    Ok(ImageSet::from_dir(dir, DType::F32)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            data,
            lambda,
            mode,
            num_steps,
            steps,
            residual,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(m) = mode {
                cfg.model.entropy = match m {
                    Mode::Gmm => EntropyMode::Gmm,
                    Mode::Gaussian => EntropyMode::Gaussian,
                };
            }
            if let Some(k) = num_steps {
                cfg.model.flow.num_steps = k;
            }
            if let Some(r) = residual {
                cfg.model.residual_head = r == Switch::On;
            }
            if let Some(l) = lambda {
                cfg.train.lambda2 = l;
            }
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            cfg.model.validate()?;
            cfg.train.validate()?;
            let mut set = training_data(data.as_ref(), &cfg)?;
            create_out(&common.out)?;
            std::fs::write(common.out.join("run.toml"), cfg.to_toml_string()?)?;
            let model = Model::new(cfg.model.clone(), DType::F32, cfg.train.seed)?;
            println!("parameters: {}", model.num_parameters());
            let report = train(&model, &mut set, &cfg.train, Some(&common.out), None)?;
            print_json(&serde_json::json!({
                "steps": report.steps,
                "model": common.out.join("model.safetensors"),
                "final_bpp_estimate": report.last.rate_bpp(),
                "final_loss": report.last.total,
            }));
        }
        Command::Finetune {
            common,
            checkpoint,
            lambda,
            data,
            steps,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let mut train_cfg: TrainConfig = cfg.train.clone();
            if let Some(s) = steps {
                train_cfg.max_steps = s;
                train_cfg.finetune_fraction = 1.0;
            }
            if let Some(s) = common.seed {
                train_cfg.seed = s;
            }
            let mut set = training_data(data.as_ref(), &cfg)?;
            create_out(&common.out)?;
            let (_, report) = finetune_for_rate(
                &checkpoint,
                lambda,
                &train_cfg,
                &mut set,
                Some(&common.out),
                None,
            )?;
            print_json(&serde_json::json!({
                "steps": report.steps,
                "lambda": lambda,
                "model": common.out.join("model.safetensors"),
            }));
        }
        Command::Encode {
            common,
            model,
            input,
            residual,
            lambda_index,
            mode,
        } => {
            let model = load_model(&model)?;
            if let Some(m) = mode {
                let want = match m {
                    Mode::Gmm => EntropyMode::Gmm,
                    Mode::Gaussian => EntropyMode::Gaussian,
                };
                if model.config().entropy != want {
                    bail!("checkpoint was trained with the other entropy model");
                }
            }
            let image = read_png(&input, DType::F32)?;
            let enc = encode_image(
                &model,
                &image,
                &EncodeOptions {
                    residual: residual == Switch::On,
                    lambda_index,
                    ..EncodeOptions::default()
                },
            )?;
            let bytes = enc.to_bytes()?;
            create_out(&common.out)?;
            let path = common.out.join(format!("{}.anfc", stem(&input)));
            std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
            print_json(&serde_json::json!({
                "output": path,
                "bytes": bytes.len(),
                "bpp": enc.bpp(),
                "estimated_bits": enc.estimate.total(),
            }));
        }
        Command::Decode {
            common,
            model,
            input,
            bypass_qe,
        } => {
            let model = load_model(&model)?;
            let bytes =
                std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let dec = decode_image(
                &model,
                &bytes,
                &DecodeOptions {
                    bypass_qe,
                    ..DecodeOptions::default()
                },
            )?;
            create_out(&common.out)?;
            let path = common.out.join(format!("{}.png", stem(&input)));
            write_png(&path, &dec.image)?;
            print_json(&serde_json::json!({ "output": path }));
        }
        Command::Eval {
            common,
            model,
            lambda,
            data,
            residual,
        } => {
            let models = model
                .iter()
                .map(|p| load_model(p))
                .collect::<Result<Vec<_>>>()?;
            let set = if models.len() == 1 && models[0].config().is_variable_rate() {
                ModelSet::Variable(&models[0])
            } else {
                if lambda.len() != models.len() {
                    bail!("pass one --lambda per fixed-rate --model");
                }
                ModelSet::Fixed(lambda.iter().copied().zip(models.iter()).collect())
            };
            let images = load_dataset(&data)?;
            let sweep = rd_sweep(&set, &images, residual == Switch::On)?;
            let files = sweep.write(&common.out)?;
            print_json(&serde_json::json!({ "curve": sweep.curve, "files": files }));
        }
        Command::Bdrate {
            common,
            test,
            anchor,
            metric,
        } => {
            let q = match metric {
                Metric::Psnr => Quality::Psnr,
                Metric::Msssim => Quality::MsSsim,
            };
            let t = Sweep::read(&test)?.curve.rate_points(q)?;
            let a = Sweep::read(&anchor)?.curve.rate_points(q)?;
            let bd = bd_rate(&t, &a)?;
            create_out(&common.out)?;
            let v = serde_json::json!({ "bd_rate_percent": bd, "test": test, "anchor": anchor });
            std::fs::write(
                common.out.join("bdrate.json"),
                serde_json::to_string_pretty(&v)?,
            )?;
            print_json(&v);
        }
        Command::Visualize {
            common,
            model,
            input,
            lambda_index,
        } => {
            let model = load_model(&model)?;
            let image = read_png(&input, DType::F32)?;
            let fig = visualize_steps(&model, &image, lambda_index, &common.out)?;
            print_json(&serde_json::json!({
                "files": fig.files,
                "x2_mse": fig.x2_mse,
                "input_high_band": fig.input_high_band,
                "step_high_band": fig.step_high_band,
            }));
        }
        Command::Selftest { common } => {
            create_out(&common.out)?;
            let checks = anfc_core::selftest::run(&common.out, common.seed.unwrap_or(0))?;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if checks.iter().any(|c| !c.passed) {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
