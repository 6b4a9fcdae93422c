//! `srgs`: dataset synthesis, training, ablation, lambda_e sweep, evaluation
//! and view rendering from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use srgs::harness::{
    build_provider, evaluate, generate_synthetic_dataset, load_dataset, reports_to_csv, run_ablation, run_experiment,
    save_dataset, sweep_lambda, sweep_spread, write_ablation, write_atomic, write_run, write_sweep, ExperimentConfig,
    Split,
};
use srgs::image_ops::{format_psnr, write_png, BitDepth};
use srgs::render::render;
use srgs::scene::{load_scene, save_scene};
use srgs::trainer::Supervision;

#[derive(Parser)]
#[command(name = "srgs", version, about = "Super-resolution Gaussian splatting experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set dataset.seed=N --set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(format!("dataset.seed={s}"));
            overrides.push(format!("train.seed={s}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_toml_with_overrides("", &overrides, "<defaults>"),
        };
        cfg.map_err(|e| UsageError(e.to_string()).into())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset: ground-truth scene, HR and LR views.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one run on a dataset and evaluate it on the test views.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Write a scene checkpoint every N iterations (0 disables).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Baseline / +prior / full component ablation.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// One run per lambda_e value (from `sweep.lambdas` unless given).
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// PSNR/SSIM of a scene on a dataset split.
    Eval {
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        scene: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        /// Also write `report.csv` here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Dump renders of a scene for dataset views.
    Render {
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        scene: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Render scale relative to the HR cameras.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// View indices; all views when omitted.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = config.resolve()?;
            let (dataset, truth) = generate_synthetic_dataset(&cfg.dataset)?;
            save_dataset(&dataset, &out)?;
            save_scene(&truth, &out.join("gt_scene.txt"))?;
            echo_config(&out, &cfg)?;
            log::info!(
                "{} views ({} train, {} test) written to {}",
                dataset.views.len(),
                dataset.train.len(),
                dataset.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            checkpoint_every,
        } => {
            let cfg = config.resolve()?;
            let dataset = load_dataset(&data)?;
            let provider = match cfg.supervision.0 {
                Supervision::LowResolution | Supervision::RegOnly => None,
                _ => Some(build_provider(&cfg.prior, &dataset)?),
            };
            echo_config(&out, &cfg)?;
            let run = run_experiment("train", &dataset, provider.as_ref(), &cfg, |rec, scene| {
                if rec.iteration % 100 == 0 {
                    log::debug!(
                        "iteration {}: loss {:.6}, {} Gaussians",
                        rec.iteration,
                        rec.loss.total,
                        rec.gaussians
                    );
                }
                if checkpoint_every > 0 && rec.iteration % checkpoint_every == 0 {
                    save_scene(
                        scene,
                        &out.join("checkpoints").join(format!("iter_{:06}.txt", rec.iteration)),
                    )?;
                }
                Ok(())
            })?;
            write_run(&out, &run)?;
            println!(
                "test PSNR {} dB, SSIM {:.4}",
                format_psnr(run.report.mean_psnr),
                run.report.mean_ssim
            );
        }
        Command::Ablate { config, data, out } => {
            let cfg = config.resolve()?;
            let dataset = load_dataset(&data)?;
            let provider = build_provider(&cfg.prior, &dataset)?;
            echo_config(&out, &cfg)?;
            let arms = run_ablation(&dataset, &provider, &cfg)?;
            write_ablation(&out, &cfg, &arms)?;
            for a in &arms {
                println!(
                    "{:<9} PSNR {} dB  SSIM {:.4}",
                    a.report.arm,
                    format_psnr(a.report.mean_psnr),
                    a.report.mean_ssim
                );
            }
        }
        Command::Sweep {
            config,
            data,
            out,
            lambdas,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = l;
                cfg.validate().map_err(|e| UsageError(e.to_string()))?;
            }
            let dataset = load_dataset(&data)?;
            let provider = build_provider(&cfg.prior, &dataset)?;
            echo_config(&out, &cfg)?;
            let points = sweep_lambda(&dataset, &provider, &cfg, &cfg.sweep.lambdas)?;
            write_sweep(&out, &cfg, &points)?;
            for p in &points {
                println!(
                    "lambda_e {:<5} PSNR {} dB",
                    p.lambda_e,
                    format_psnr(p.run.report.mean_psnr)
                );
            }
            let spread = sweep_spread(&points);
            println!("spread {spread:.3} dB (gate {} dB)", cfg.sweep.stability_gate_db);
        }
        Command::Eval {
            data,
            scene,
            split,
            out,
        } => {
            let dataset = load_dataset(&data)?;
            let scene = load_scene(&scene)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let report = evaluate(&scene, &dataset, split)?;
            let csv = reports_to_csv(std::slice::from_ref(&report));
            match out {
                Some(dir) => write_atomic(&dir.join("report.csv"), csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Render {
            data,
            scene,
            out,
            scale,
            views,
        } => {
            let dataset = load_dataset(&data)?;
            let scene = load_scene(&scene)?;
            let ids = views.unwrap_or_else(|| (0..dataset.views.len()).collect());
            for id in ids {
                let view = dataset.views.get(id).ok_or_else(|| {
                    UsageError(format!("view {id} out of range (dataset has {})", dataset.views.len()))
                })?;
                let img = render(&scene, &view.camera, scale)?;
                write_png(&out.join(format!("{id:05}.png")), &img, BitDepth::Eight)?;
            }
        }
    }
    Ok(())
}

/// Bad flags or configuration, reported with exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<srgs::Error>() {
        Some(srgs::Error::Numerical(_)) => 3,
        Some(srgs::Error::Argument(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
