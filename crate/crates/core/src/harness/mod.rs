//! Experiment orchestration: configuration, evaluation on held-out views,
//! the three-arm component ablation and the lambda_e sweep.

mod dataset;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_synthetic_dataset, load_dataset, save_dataset, sphere_cameras, split_indices, synthetic_scene, Dataset,
    DatasetConfig, DatasetMeta, View,
};

use crate::image_ops::{format_psnr, psnr, ssim, write_png, BitDepth, ImageBuffer};
use crate::objective::ObjectiveConfig;
use crate::plot::{line_plot, PlotStyle};
use crate::prior::{PriorKind, PriorProvider};
use crate::render::render;
use crate::scene::{save_scene, GaussianScene};
use crate::trainer::{log_to_csv, train_with, IterationRecord, Supervision, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// Image directory of the file provider.
    pub dir: Option<PathBuf>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Oracle,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Largest accepted PSNR spread (dB) over the swept values.
    pub stability_gate_db: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.2, 0.35, 0.5, 0.65, 0.8],
            stability_gate_db: 1.5,
        }
    }
}

/// Everything a run depends on; echoed into every output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub supervision: SupervisionConfig,
    pub dataset: DatasetConfig,
    pub prior: PriorConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

/// Serde-friendly wrapper so the default can live in the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupervisionConfig(pub Supervision);

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig(Supervision::Objective)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        if self.sweep.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Argument("sweep lambdas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Argument(format!("serializing config: {e}")))
    }

    /// Parses TOML text, applies `key.path=value` overrides, validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String], origin: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Load {
            what: origin.to_string(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Load {
            what: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides, &path.display().to_string())
    }
}

/// Sets a dotted key to a TOML value; bare words are taken as strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override `{assignment}` is not of the form key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Argument(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Pseudo-HR provider described by `cfg`.
pub fn build_provider(cfg: &PriorConfig, dataset: &Dataset) -> Result<PriorProvider> {
    let factor = dataset.resample.factor;
    match cfg.kind {
        PriorKind::Bicubic => Ok(PriorProvider::Bicubic { factor }),
        PriorKind::Oracle => {
            if let Some(&i) = dataset.train.iter().find(|&&i| dataset.views[i].hr.is_none()) {
                return Err(Error::Load {
                    what: "oracle prior".into(),
                    message: format!("view {i} has no HR ground truth"),
                });
            }
            Ok(dataset.oracle_provider())
        }
        PriorKind::File => {
            let dir = cfg
                .dir
                .clone()
                .ok_or_else(|| Error::Argument("prior.kind = \"file\" needs prior.dir".into()))?;
            Ok(PriorProvider::File { factor, dir })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub arm: String,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub gaussians: usize,
    pub runtime_seconds: f64,
    /// Fully resolved config of the run, as TOML.
    pub config: String,
}

/// Renders each view of `split` at HR and scores it against ground truth.
pub fn evaluate(scene: &GaussianScene, dataset: &Dataset, split: Split) -> Result<ExperimentReport> {
    let ids = match split {
        Split::Train => &dataset.train,
        Split::Test => &dataset.test,
    };
    if ids.is_empty() {
        return Err(Error::Argument("evaluation split is empty".into()));
    }
    let mut views = Vec::with_capacity(ids.len());
    for &id in ids {
        let v = &dataset.views[id];
        let gt = v.hr.as_ref().ok_or_else(|| Error::Load {
            what: format!("evaluation of view {id}"),
            message: "no HR ground truth".into(),
        })?;
        let img = render(scene, &v.camera, 1.0)?;
        views.push(ViewMetrics {
            view: id,
            psnr: psnr(&img, gt)?,
            ssim: ssim(&img, gt)?,
        });
    }
    let n = views.len() as f64;
    Ok(ExperimentReport {
        arm: "eval".into(),
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        gaussians: scene.len(),
        runtime_seconds: 0.0,
        config: String::new(),
    })
}

pub const REPORT_HEADER: &str = "arm,view,psnr,ssim";

/// Per-view rows followed by one `mean` row per report.
pub fn reports_to_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        for v in &r.views {
            let _ = writeln!(out, "{},{},{},{:.6}", r.arm, v.view, format_psnr(v.psnr), v.ssim);
        }
        let _ = writeln!(out, "{},mean,{},{:.6}", r.arm, format_psnr(r.mean_psnr), r.mean_ssim);
    }
    out
}

/// One arm's training result with its evaluation.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub report: ExperimentReport,
    pub scene: GaussianScene,
    pub log: Vec<IterationRecord>,
}

/// Trains one run described by `cfg` and evaluates it on the test split.
pub fn run_experiment(
    arm: &str,
    dataset: &Dataset,
    provider: Option<&PriorProvider>,
    cfg: &ExperimentConfig,
    on_iteration: impl FnMut(&IterationRecord, &GaussianScene) -> Result<()>,
) -> Result<ArmRun> {
    let start = Instant::now();
    let TrainOutcome { scene, log, .. } = train_with(
        dataset,
        provider,
        cfg.supervision.0,
        &cfg.objective,
        &cfg.train,
        on_iteration,
    )?;
    let mut report = evaluate(&scene, dataset, Split::Test)?;
    report.arm = arm.to_string();
    report.runtime_seconds = start.elapsed().as_secs_f64();
    report.config = cfg.to_toml()?;
    log::info!(
        "{arm}: PSNR {} dB, SSIM {:.4}, {} Gaussians",
        format_psnr(report.mean_psnr),
        report.mean_ssim,
        scene.len()
    );
    Ok(ArmRun { report, scene, log })
}

pub const ABLATION_ARMS: [&str; 3] = ["baseline", "prior", "full"];

/// Resolved configs of the three ablation arms: LR-only training, prior term
/// alone (lambda_e = 1) and the configured combination.
pub fn ablation_configs(base: &ExperimentConfig) -> [ExperimentConfig; 3] {
    let mut baseline = base.clone();
    baseline.supervision = SupervisionConfig(Supervision::LowResolution);
    let mut prior = base.clone();
    prior.supervision = SupervisionConfig(Supervision::Objective);
    prior.objective.lambda_e = 1.0;
    let mut full = base.clone();
    full.supervision = SupervisionConfig(Supervision::Objective);
    [baseline, prior, full]
}

pub fn run_ablation(dataset: &Dataset, provider: &PriorProvider, base: &ExperimentConfig) -> Result<Vec<ArmRun>> {
    ABLATION_ARMS
        .iter()
        .zip(ablation_configs(base))
        .map(|(arm, cfg)| run_experiment(arm, dataset, Some(provider), &cfg, |_, _| Ok(())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda_e: f64,
    pub run: ArmRun,
}

pub fn sweep_lambda(
    dataset: &Dataset,
    provider: &PriorProvider,
    base: &ExperimentConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepPoint>> {
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Argument("sweep lambdas must lie in [0, 1]".into()));
    }
    lambdas
        .iter()
        .map(|&lambda_e| {
            let mut cfg = base.clone();
            cfg.supervision = SupervisionConfig(Supervision::Objective);
            cfg.objective.lambda_e = lambda_e;
            let run = run_experiment(
                &format!("lambda_e={lambda_e}"),
                dataset,
                Some(provider),
                &cfg,
                |_, _| Ok(()),
            )?;
            Ok(SweepPoint { lambda_e, run })
        })
        .collect()
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("lambda_e,psnr,ssim,gaussians\n");
    for p in points {
        let r = &p.run.report;
        let _ = writeln!(
            out,
            "{},{},{:.6},{}",
            p.lambda_e,
            format_psnr(r.mean_psnr),
            r.mean_ssim,
            r.gaussians
        );
    }
    out
}

/// Max minus min mean PSNR over the sweep.
pub fn sweep_spread(points: &[SweepPoint]) -> f64 {
    let ps = points.iter().map(|p| p.run.report.mean_psnr);
    ps.clone().fold(f64::NEG_INFINITY, f64::max) - ps.fold(f64::INFINITY, f64::min)
}

/// PSNR versus lambda_e.
pub fn sweep_plot(points: &[SweepPoint]) -> ImageBuffer {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.lambda_e, p.run.report.mean_psnr.min(99.99)))
        .collect();
    line_plot(&xy, &PlotStyle::default())
}

/// Echoed config, scene, training log and per-view report of one run.
/// Wall-clock time goes to `runtime.txt` so the CSVs stay reproducible.
pub fn write_run(dir: &Path, run: &ArmRun) -> Result<()> {
    write_atomic(&dir.join("config.toml"), run.report.config.as_bytes())?;
    save_scene(&run.scene, &dir.join("scene.txt"))?;
    write_atomic(&dir.join("train_log.csv"), log_to_csv(&run.log).as_bytes())?;
    write_atomic(
        &dir.join("report.csv"),
        reports_to_csv(std::slice::from_ref(&run.report)).as_bytes(),
    )?;
    write_atomic(
        &dir.join("runtime.txt"),
        format!("{:.3}\n", run.report.runtime_seconds).as_bytes(),
    )
}

pub fn write_ablation(dir: &Path, base: &ExperimentConfig, arms: &[ArmRun]) -> Result<()> {
    write_atomic(&dir.join("config.toml"), base.to_toml()?.as_bytes())?;
    for arm in arms {
        write_run(&dir.join(&arm.report.arm), arm)?;
    }
    let reports: Vec<ExperimentReport> = arms.iter().map(|a| a.report.clone()).collect();
    write_atomic(&dir.join("ablation.csv"), reports_to_csv(&reports).as_bytes())
}

pub fn write_sweep(dir: &Path, base: &ExperimentConfig, points: &[SweepPoint]) -> Result<()> {
    write_atomic(&dir.join("config.toml"), base.to_toml()?.as_bytes())?;
    for p in points {
        write_run(&dir.join(format!("lambda_{}", p.lambda_e)), &p.run)?;
    }
    write_atomic(&dir.join("sweep.csv"), sweep_to_csv(points).as_bytes())?;
    write_png(&dir.join("sweep.png"), &sweep_plot(points), BitDepth::Eight)
}
