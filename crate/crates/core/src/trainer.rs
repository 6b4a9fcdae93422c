//! Optimization loop: Adam over every Gaussian parameter, clone/split
//! densification, opacity pruning and the per-iteration
//! render -> loss -> backward -> step orchestration.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::harness::Dataset;
use crate::image_ops::{ImageBuffer, ResampleSpec};
use crate::objective::{evaluate, mixed_loss, prior_term, reg_term, LossReport, ObjectiveConfig};
use crate::prior::{PriorProvider, PriorSet};
use crate::render::{RenderGradients, RenderPass};
use crate::scene::{init_scene_random, logit, rotation_from_unit_quaternion, Camera, GaussianParams, GaussianScene};
use crate::{Error, Result};

/// Number of optimized scalars per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity_logit: 5e-2,
            color: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub learning_rates: LearningRates,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub densify_interval: u64,
    pub densify_from: u64,
    /// End of the densification phase as a fraction of `iterations`.
    pub densify_until_fraction: f64,
    /// Threshold on the mean 2D positional gradient (normalized device units).
    pub grad_threshold: f64,
    /// Clone below, split above this max world scale, as a fraction of the
    /// scene extent.
    pub split_scale_threshold: f64,
    pub prune_opacity: f64,
    pub opacity_reset_interval: u64,
    /// Densification never grows the scene past this many Gaussians.
    pub max_gaussians: usize,
    pub init_gaussians: usize,
    /// LR-only iterations run before the main phase; 0 starts from the
    /// random initialization directly.
    pub warm_start_iterations: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            learning_rates: LearningRates::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-15,
            densify_interval: 100,
            densify_from: 500,
            densify_until_fraction: 0.6,
            grad_threshold: 2e-4,
            split_scale_threshold: 0.01,
            prune_opacity: 5e-3,
            opacity_reset_interval: 3000,
            max_gaussians: 5000,
            init_gaussians: 1000,
            warm_start_iterations: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rates;
        let rates = [
            ("position_init", lr.position_init),
            ("position_final", lr.position_final),
            ("log_scale", lr.log_scale),
            ("rotation", lr.rotation),
            ("opacity_logit", lr.opacity_logit),
            ("color", lr.color),
            ("grad_threshold", self.grad_threshold),
            ("split_scale_threshold", self.split_scale_threshold),
            ("prune_opacity", self.prune_opacity),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Argument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.densify_interval == 0 || self.opacity_reset_interval == 0 {
            return Err(Error::Argument(
                "densify_interval and opacity_reset_interval must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.densify_until_fraction) {
            return Err(Error::Argument("densify_until_fraction must lie in [0, 1]".into()));
        }
        if self.init_gaussians == 0 || self.max_gaussians < self.init_gaussians {
            return Err(Error::Argument("need 1 <= init_gaussians <= max_gaussians".into()));
        }
        Ok(())
    }

    pub fn densify_until(&self) -> u64 {
        (self.densify_until_fraction * self.iterations as f64).round() as u64
    }

    /// Log-linear decay from `position_init` to `position_final` over the run.
    pub fn position_lr(&self, iteration: u64) -> f64 {
        let lr = &self.learning_rates;
        let t = if self.iterations == 0 {
            1.0
        } else {
            (iteration as f64 / self.iterations as f64).clamp(0.0, 1.0)
        };
        ((1.0 - t) * lr.position_init.ln() + t * lr.position_final.ln()).exp()
    }

    fn group_rates(&self, iteration: u64, extent: f64) -> [f64; PARAMS_PER_GAUSSIAN] {
        let lr = &self.learning_rates;
        let p = self.position_lr(iteration) * extent;
        [
            p,
            p,
            p,
            lr.log_scale,
            lr.log_scale,
            lr.log_scale,
            lr.rotation,
            lr.rotation,
            lr.rotation,
            lr.rotation,
            lr.opacity_logit,
            lr.color,
            lr.color,
            lr.color,
        ]
    }
}

/// Which images supervise the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    /// Weighted prior + consistency objective at HR.
    Objective,
    /// Prior term alone, bypassing the weighting.
    PriorOnly,
    /// Consistency term alone, bypassing the weighting.
    RegOnly,
    /// Render at LR and compare with the LR observation directly.
    LowResolution,
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Supervision::Objective => "objective",
            Supervision::PriorOnly => "prior-only",
            Supervision::RegOnly => "reg-only",
            Supervision::LowResolution => "low-resolution",
        })
    }
}

fn params_to_array(g: &GaussianParams) -> [f64; PARAMS_PER_GAUSSIAN] {
    let p = &g.position;
    let s = &g.log_scale;
    let q = &g.rotation;
    let c = &g.color;
    [
        p.x,
        p.y,
        p.z,
        s.x,
        s.y,
        s.z,
        q[0],
        q[1],
        q[2],
        q[3],
        g.opacity_logit,
        c.x,
        c.y,
        c.z,
    ]
}

fn array_to_params(a: &[f64; PARAMS_PER_GAUSSIAN]) -> GaussianParams {
    GaussianParams {
        position: Vector3::new(a[0], a[1], a[2]),
        log_scale: Vector3::new(a[3], a[4], a[5]),
        rotation: [a[6], a[7], a[8], a[9]],
        opacity_logit: a[10],
        color: Vector3::new(a[11], a[12], a[13]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

/// One bias-corrected Adam update of a scalar; `step` is 1-based.
pub fn adam_update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, step: u64, lr: f64, s: &AdamSettings) {
    *m = s.beta1 * *m + (1.0 - s.beta1) * grad;
    *v = s.beta2 * *v + (1.0 - s.beta2) * grad * grad;
    let bc1 = 1.0 - s.beta1.powi(step as i32);
    let bc2 = 1.0 - s.beta2.powi(step as i32);
    *param -= lr * (*m / bc1) / ((*v / bc2).sqrt() + s.epsilon);
}

/// Adam moments per Gaussian parameter and the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub second_moment: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            first_moment: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            second_moment: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// Running sums of the densification statistic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &RenderGradients) {
        for i in 0..grads.len() {
            if grads.visible[i] {
                self.grad_sum[i] += grads.mean2d_grad_norm[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// Adam step on every parameter of every Gaussian.
pub fn adam_step(
    scene: &mut GaussianScene,
    grads: &RenderGradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
    iteration: u64,
    extent: f64,
) -> Result<()> {
    let n = scene.len();
    if grads.len() != n || state.len() != n {
        return Err(Error::Dimension(format!(
            "adam step: scene has {n} Gaussians, gradients {}, optimizer state {}",
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    let rates = config.group_rates(iteration, extent);
    let settings = AdamSettings::from(config);
    let flat = grads.flatten();
    for i in 0..n {
        let mut p = params_to_array(&scene.gaussians[i]);
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        for k in 0..PARAMS_PER_GAUSSIAN {
            adam_update(
                &mut p[k],
                flat[i * PARAMS_PER_GAUSSIAN + k],
                &mut m[k],
                &mut v[k],
                state.step,
                rates[k],
                &settings,
            );
        }
        scene.gaussians[i] = array_to_params(&p);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub iteration: u64,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub gaussians: usize,
}

/// Clone small high-gradient Gaussians, split large ones into two children,
/// then drop Gaussians below the opacity floor. Resets `stats`.
pub fn densify_and_prune(
    scene: &mut GaussianScene,
    state: &mut OptimizerState,
    stats: &mut DensifyStats,
    config: &TrainConfig,
    iteration: u64,
    extent: f64,
) -> Result<DensifyReport> {
    let n = scene.len();
    if state.len() != n || stats.grad_sum.len() != n {
        return Err(Error::Dimension(format!(
            "densify: scene has {n} Gaussians, optimizer state {}, stats {}",
            state.len(),
            stats.grad_sum.len()
        )));
    }
    let mut candidates: Vec<(usize, f64)> = (0..n)
        .map(|i| (i, stats.mean(i)))
        .filter(|&(_, g)| g >= config.grad_threshold)
        .collect();
    // Strongest gradients first when the capacity cap binds.
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(config.max_gaussians.saturating_sub(n));
    candidates.sort_by_key(|c| c.0);

    let size_limit = config.split_scale_threshold * extent;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration);
    let mut split_parent = vec![false; n];
    let mut clones = Vec::new();
    let mut children = Vec::new();
    for &(i, _) in &candidates {
        let g = &scene.gaussians[i];
        let scale = g.scale();
        if scale.max() <= size_limit {
            clones.push(*g);
        } else {
            split_parent[i] = true;
            let rot = rotation_from_unit_quaternion(&crate::scene::normalize_quaternion(&g.rotation)?);
            for _ in 0..2 {
                let z = Vector3::from_fn(|k, _| scale[k] * rng.sample::<f64, _>(StandardNormal));
                let mut child = *g;
                child.position = g.position + rot * z;
                child.log_scale = g.log_scale.map(|s| s - 1.6f64.ln());
                children.push(child);
            }
        }
    }
    let report_clone = clones.len();
    let report_split = children.len() / 2;

    let mut gaussians = Vec::with_capacity(n + clones.len() + children.len());
    let mut m1 = Vec::with_capacity(gaussians.capacity());
    let mut m2 = Vec::with_capacity(gaussians.capacity());
    for (i, _) in split_parent.iter().enumerate().filter(|(_, &s)| !s) {
        gaussians.push(scene.gaussians[i]);
        m1.push(state.first_moment[i]);
        m2.push(state.second_moment[i]);
    }
    for g in clones.into_iter().chain(children) {
        gaussians.push(g);
        m1.push([0.0; PARAMS_PER_GAUSSIAN]);
        m2.push([0.0; PARAMS_PER_GAUSSIAN]);
    }

    let before = gaussians.len();
    let keep: Vec<bool> = gaussians.iter().map(|g| g.opacity() >= config.prune_opacity).collect();
    scene.gaussians = retain_flagged(gaussians, &keep);
    state.first_moment = retain_flagged(m1, &keep);
    state.second_moment = retain_flagged(m2, &keep);
    *stats = DensifyStats::new(scene.len());

    if state.len() != scene.len() {
        return Err(Error::Dimension(
            "optimizer state out of sync after densification".into(),
        ));
    }
    Ok(DensifyReport {
        iteration,
        cloned: report_clone,
        split: report_split,
        pruned: before - scene.len(),
        gaussians: scene.len(),
    })
}

fn retain_flagged<T>(items: Vec<T>, keep: &[bool]) -> Vec<T> {
    items
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| x)
        .collect()
}

/// Clamp every opacity to at most 0.01 and clear the opacity moments.
pub fn reset_opacity(scene: &mut GaussianScene, state: &mut OptimizerState) {
    let ceiling = logit(0.01);
    for (g, (m, v)) in scene
        .gaussians
        .iter_mut()
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        g.opacity_logit = g.opacity_logit.min(ceiling);
        m[10] = 0.0;
        v[10] = 0.0;
    }
}

/// One training view. `target` is the pseudo-HR image for arms that use it.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub id: usize,
    pub camera: &'a Camera,
    pub lr: &'a ImageBuffer,
    pub target: Option<&'a ImageBuffer>,
}

#[derive(Debug, Clone)]
pub struct TrainInputs<'a> {
    pub views: Vec<TrainView<'a>>,
    pub resample: ResampleSpec,
    /// Scene extent used to scale position rates and the split threshold.
    pub extent: f64,
}

/// Radius of the camera-center cloud around its mean, padded by 10%.
pub fn scene_extent(cameras: &[&Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if radius > 0.0 {
        1.1 * radius
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub view: usize,
    pub loss: LossReport,
    pub gaussians: usize,
    pub position_lr: f64,
}

pub const LOG_HEADER: &str = "iteration,view,total,prior_l1,prior_dssim,reg_l1,reg_dssim,prior_tv,gaussians,position_lr,masked_fraction_prior,masked_fraction_reg";

/// Training log as CSV, one row per iteration.
pub fn log_to_csv(log: &[IterationRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.view,
            l.total,
            l.prior_l1,
            l.prior_dssim,
            l.reg_l1,
            l.reg_dssim,
            l.prior_tv,
            r.gaussians,
            r.position_lr,
            l.masked_fraction_prior,
            l.masked_fraction_reg
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scene: GaussianScene,
    pub log: Vec<IterationRecord>,
    pub densify_events: Vec<DensifyReport>,
}

fn view_loss(
    view: &TrainView<'_>,
    scene: &GaussianScene,
    supervision: Supervision,
    resample: &ResampleSpec,
    objective: &ObjectiveConfig,
    iteration: u64,
) -> Result<(RenderPass, LossReport, ImageBuffer)> {
    let target = || {
        view.target.ok_or_else(|| Error::Load {
            what: format!("pseudo-HR target for view {}", view.id),
            message: "missing".into(),
        })
    };
    let scale = if supervision == Supervision::LowResolution {
        1.0 / resample.factor as f64
    } else {
        1.0
    };
    let pass = RenderPass::forward(scene, view.camera, scale)?;
    let dims = |e: Error| match e {
        Error::Dimension(m) => Error::Dimension(format!("view {}: {m}", view.id)),
        other => other,
    };
    let mut report = LossReport::default();
    let grad = match supervision {
        Supervision::Objective => {
            let pseudo = if objective.lambda_e > 0.0 {
                Some(target()?)
            } else {
                None
            };
            let (r, g) = evaluate(&pass.image, pseudo, view.lr, resample, objective, iteration).map_err(dims)?;
            report = r;
            g
        }
        Supervision::PriorOnly => {
            let t = prior_term(&pass.image, target()?, objective).map_err(dims)?;
            report.total = t.value;
            report.prior_l1 = t.photometric;
            report.prior_dssim = t.dssim;
            report.prior_tv = t.tv;
            report.masked_fraction_prior = t.masked_fraction;
            t.grad
        }
        Supervision::RegOnly => {
            let t = reg_term(&pass.image, view.lr, resample, objective).map_err(dims)?;
            report.total = t.value;
            report.reg_l1 = t.photometric;
            report.reg_dssim = t.dssim;
            report.masked_fraction_reg = t.masked_fraction;
            t.grad
        }
        Supervision::LowResolution => {
            pass.image
                .check_same_dims(view.lr, &format!("view {}: LR render vs LR observation", view.id))?;
            let (value, p, d, g) = mixed_loss(objective.reg_penalty, objective.lambda_cvc, &pass.image, view.lr, None)?;
            report.total = value;
            report.reg_l1 = p;
            report.reg_dssim = d;
            g
        }
    };
    Ok((pass, report, grad))
}

/// Optimize `initial` against `inputs`. `on_iteration` sees every log record
/// together with the updated scene (checkpoints, progress).
pub fn train_scene(
    initial: GaussianScene,
    inputs: &TrainInputs<'_>,
    supervision: Supervision,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationRecord, &GaussianScene) -> Result<()>,
) -> Result<TrainOutcome> {
    objective.validate()?;
    config.validate()?;
    if inputs.views.is_empty() && config.iterations > 0 {
        return Err(Error::Argument("no training views".into()));
    }
    let mut scene = initial;
    let mut state = OptimizerState::new(scene.len());
    let mut stats = DensifyStats::new(scene.len());
    let mut log = Vec::with_capacity(config.iterations as usize);
    let mut densify_events = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let densify_until = config.densify_until();

    for it in 1..=config.iterations {
        if order.is_empty() {
            order = (0..inputs.views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = &inputs.views[order.pop().expect("non-empty view order")];

        let (pass, report, upstream) = view_loss(view, &scene, supervision, &inputs.resample, objective, it)?;
        if !report.total.is_finite() || !upstream.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {it} (view {})",
                view.id
            )));
        }
        let grads = pass.backward(&scene, &upstream)?;
        if !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at iteration {it} (view {})",
                view.id
            )));
        }
        drop(pass);

        adam_step(&mut scene, &grads, &mut state, config, it, inputs.extent)?;
        if it < densify_until {
            stats.accumulate(&grads);
            if it > config.densify_from && it % config.densify_interval == 0 {
                densify_events.push(densify_and_prune(
                    &mut scene,
                    &mut state,
                    &mut stats,
                    config,
                    it,
                    inputs.extent,
                )?);
            }
            if it % config.opacity_reset_interval == 0 {
                reset_opacity(&mut scene, &mut state);
            }
        }
        if scene
            .gaussians
            .iter()
            .any(|g| !params_to_array(g).iter().all(|v| v.is_finite()))
        {
            return Err(Error::Numerical(format!("non-finite parameter after iteration {it}")));
        }

        let record = IterationRecord {
            iteration: it,
            view: view.id,
            loss: report,
            gaussians: scene.len(),
            position_lr: config.position_lr(it) * inputs.extent,
        };
        on_iteration(&record, &scene)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        scene,
        log,
        densify_events,
    })
}

/// Training inputs for the dataset's train split. Targets come from `priors`
/// when given.
pub fn train_inputs<'a>(dataset: &'a Dataset, priors: Option<&'a PriorSet>) -> Result<TrainInputs<'a>> {
    let mut views = Vec::with_capacity(dataset.train.len());
    for &id in &dataset.train {
        let v = &dataset.views[id];
        let target = match priors {
            Some(p) => Some(p.get(id).ok_or_else(|| Error::Load {
                what: format!("pseudo-HR target for view {id}"),
                message: "not produced by the prior provider".into(),
            })?),
            None => None,
        };
        views.push(TrainView {
            id,
            camera: &v.camera,
            lr: &v.lr,
            target,
        });
    }
    let cameras: Vec<&Camera> = views.iter().map(|v| v.camera).collect();
    Ok(TrainInputs {
        extent: scene_extent(&cameras),
        views,
        resample: dataset.resample,
    })
}

/// Random initialization inside the dataset bounds, optionally refined by an
/// LR-only warm-start phase.
pub fn initial_scene(dataset: &Dataset, objective: &ObjectiveConfig, config: &TrainConfig) -> Result<GaussianScene> {
    let scene = init_scene_random(
        config.init_gaussians,
        &dataset.meta.bounds,
        config.seed,
        Vector3::from(dataset.meta.background),
    )?;
    if config.warm_start_iterations == 0 {
        return Ok(scene);
    }
    let warm = TrainConfig {
        iterations: config.warm_start_iterations,
        ..config.clone()
    };
    let inputs = train_inputs(dataset, None)?;
    Ok(
        train_scene(scene, &inputs, Supervision::LowResolution, objective, &warm, |_, _| {
            Ok(())
        })?
        .scene,
    )
}

/// Full run on the dataset's train split with the given supervision.
pub fn train_with(
    dataset: &Dataset,
    provider: Option<&PriorProvider>,
    supervision: Supervision,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
    on_iteration: impl FnMut(&IterationRecord, &GaussianScene) -> Result<()>,
) -> Result<TrainOutcome> {
    let needs_prior = match supervision {
        Supervision::PriorOnly => true,
        Supervision::Objective => objective.lambda_e > 0.0,
        Supervision::RegOnly | Supervision::LowResolution => false,
    };
    let priors = match (needs_prior, provider) {
        (true, Some(p)) => {
            if p.factor() != dataset.resample.factor {
                return Err(Error::Argument(format!(
                    "prior factor {} differs from dataset factor {}",
                    p.factor(),
                    dataset.resample.factor
                )));
            }
            Some(PriorSet::precompute(
                p,
                dataset.train.iter().map(|&i| (i, &dataset.views[i].lr)),
            )?)
        }
        (true, None) => {
            return Err(Error::Argument(format!(
                "{supervision} supervision needs a prior provider"
            )))
        }
        (false, _) => None,
    };
    let inputs = train_inputs(dataset, priors.as_ref())?;
    let initial = initial_scene(dataset, objective, config)?;
    train_scene(initial, &inputs, supervision, objective, config, on_iteration)
}

/// Objective-supervised run: pseudo-HR targets from `provider`, weighting
/// from `objective`.
pub fn train(
    dataset: &Dataset,
    provider: &PriorProvider,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(
        dataset,
        Some(provider),
        Supervision::Objective,
        objective,
        config,
        |_, _| Ok(()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::psnr;
    use crate::render::render;
    use crate::scene::Aabb;

    fn settings() -> AdamSettings {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let (mut p, mut m, mut v) = (0.5, 0.0, 0.0);
        adam_update(&mut p, 1.0, &mut m, &mut v, 1, 0.01, &settings());
        // m_hat = v_hat = 1 after bias correction.
        assert!((p - (0.5 - 0.01 / (1.0 + 1e-15))).abs() < 1e-12);
    }

    #[test]
    fn adam_second_identical_gradient() {
        let s = settings();
        let (mut p, mut m, mut v) = (0.0, 0.0, 0.0);
        adam_update(&mut p, 2.0, &mut m, &mut v, 1, 0.1, &s);
        let before = p;
        adam_update(&mut p, 2.0, &mut m, &mut v, 2, 0.1, &s);
        // Hand-stepped oracle.
        let m2 = 0.9 * (0.1 * 2.0) + 0.1 * 2.0;
        let v2 = 0.999 * (0.001 * 4.0) + 0.001 * 4.0;
        let step = 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-15);
        assert!(((before - p) - step).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut scene = init_scene_random(5, &Aabb::unit(), 1, Vector3::zeros()).unwrap();
        let before = scene.clone();
        let mut state = OptimizerState::new(5);
        adam_step(
            &mut scene,
            &RenderGradients::zeros(5),
            &mut state,
            &TrainConfig::default(),
            1,
            1.0,
        )
        .unwrap();
        assert_eq!(scene, before);
        assert!(adam_step(
            &mut scene,
            &RenderGradients::zeros(4),
            &mut state,
            &TrainConfig::default(),
            2,
            1.0
        )
        .is_err());
    }

    fn stats_with(values: &[f64]) -> DensifyStats {
        DensifyStats {
            grad_sum: values.to_vec(),
            count: vec![1; values.len()],
        }
    }

    #[test]
    fn densify_below_threshold_only_prunes() {
        let mut scene = init_scene_random(4, &Aabb::unit(), 2, Vector3::zeros()).unwrap();
        scene.gaussians[1].opacity_logit = logit(1e-3);
        let mut state = OptimizerState::new(4);
        let mut stats = stats_with(&[0.0; 4]);
        let r = densify_and_prune(&mut scene, &mut state, &mut stats, &TrainConfig::default(), 600, 1.0).unwrap();
        assert_eq!((r.cloned, r.split, r.pruned, scene.len(), state.len()), (0, 0, 1, 3, 3));
    }

    #[test]
    fn small_high_gradient_gaussian_is_cloned() {
        let mut scene = init_scene_random(3, &Aabb::unit(), 3, Vector3::zeros()).unwrap();
        for g in &mut scene.gaussians {
            g.log_scale = Vector3::repeat(0.001f64.ln());
        }
        let mut state = OptimizerState::new(3);
        state.first_moment[0][0] = 7.0;
        let mut stats = stats_with(&[1.0, 0.0, 0.0]);
        let r = densify_and_prune(&mut scene, &mut state, &mut stats, &TrainConfig::default(), 600, 1.0).unwrap();
        assert_eq!((r.cloned, r.split, scene.len(), state.len()), (1, 0, 4, 4));
        assert_eq!(scene.gaussians[3], scene.gaussians[0]);
        assert_eq!(state.first_moment[0][0], 7.0);
        assert_eq!(state.first_moment[3], [0.0; PARAMS_PER_GAUSSIAN]);
        assert_eq!(stats.grad_sum, vec![0.0; 4]);
    }

    #[test]
    fn large_gaussian_splits_deterministically() {
        let mut scene = init_scene_random(2, &Aabb::unit(), 4, Vector3::zeros()).unwrap();
        scene.gaussians[1].log_scale = Vector3::repeat(0.2f64.ln());
        let run = |scene: &GaussianScene| {
            let mut s = scene.clone();
            let mut state = OptimizerState::new(2);
            let r = densify_and_prune(
                &mut s,
                &mut state,
                &mut stats_with(&[0.0, 1.0]),
                &TrainConfig::default(),
                700,
                1.0,
            )
            .unwrap();
            (s, r)
        };
        let (a, r) = run(&scene);
        let (b, _) = run(&scene);
        assert_eq!(a, b);
        assert_eq!((r.split, a.len()), (1, 3));
        for child in &a.gaussians[1..] {
            assert!((child.scale().x - 0.2 / 1.6).abs() < 1e-12);
            assert_ne!(child.position, scene.gaussians[1].position);
        }
    }

    #[test]
    fn capacity_cap_limits_growth() {
        let mut scene = init_scene_random(4, &Aabb::unit(), 5, Vector3::zeros()).unwrap();
        for g in &mut scene.gaussians {
            g.log_scale = Vector3::repeat(0.001f64.ln());
        }
        let config = TrainConfig {
            max_gaussians: 5,
            init_gaussians: 4,
            ..Default::default()
        };
        let mut state = OptimizerState::new(4);
        let r = densify_and_prune(
            &mut scene,
            &mut state,
            &mut stats_with(&[1.0, 3.0, 2.0, 1.0]),
            &config,
            600,
            1.0,
        )
        .unwrap();
        assert_eq!((r.cloned, scene.len()), (1, 5));
        assert_eq!(scene.gaussians[4], scene.gaussians[1]);
    }

    #[test]
    fn opacity_reset_clamps() {
        let mut scene = init_scene_random(2, &Aabb::unit(), 6, Vector3::zeros()).unwrap();
        scene.gaussians[1].opacity_logit = logit(0.001);
        let mut state = OptimizerState::new(2);
        state.first_moment[0][10] = 1.0;
        reset_opacity(&mut scene, &mut state);
        assert!((scene.gaussians[0].opacity() - 0.01).abs() < 1e-12);
        assert_eq!(scene.gaussians[1].opacity_logit, logit(0.001));
        assert_eq!(state.first_moment[0][10], 0.0);
    }

    #[test]
    fn position_rate_decays_log_linearly() {
        let c = TrainConfig {
            iterations: 100,
            ..Default::default()
        };
        assert!((c.position_lr(0) - 1.6e-4).abs() < 1e-18);
        assert!((c.position_lr(50) - 1.6e-5).abs() < 1e-17);
        assert!((c.position_lr(100) - 1.6e-6).abs() < 1e-18);
    }

    fn toy_problem(perturb: bool) -> (GaussianScene, GaussianScene, Vec<Camera>, Vec<ImageBuffer>) {
        let truth = GaussianScene {
            gaussians: vec![GaussianParams {
                position: Vector3::zeros(),
                log_scale: Vector3::repeat(0.4f64.ln()),
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: 2.0,
                color: Vector3::new(0.8, 0.3, 0.2),
            }],
            background: Vector3::zeros(),
        };
        let cams: Vec<Camera> = [(-3.0, 0.3), (3.0, -0.2), (0.5, 3.0)]
            .iter()
            .map(|&(x, y)| {
                let eye = Vector3::new(x, y, -3.0);
                Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 20.0, 16, 16, 0.1).unwrap()
            })
            .collect();
        let hr: Vec<ImageBuffer> = cams.iter().map(|c| render(&truth, c, 1.0).unwrap()).collect();
        let mut start = truth.clone();
        if perturb {
            start.gaussians[0].color = Vector3::new(0.4, 0.6, 0.5);
        }
        (truth, start, cams, hr)
    }

    #[test]
    fn color_perturbation_is_recovered() {
        let (_, start, cams, hr) = toy_problem(true);
        let inputs = TrainInputs {
            views: cams
                .iter()
                .zip(&hr)
                .enumerate()
                .map(|(id, (camera, img))| TrainView {
                    id,
                    camera,
                    lr: img,
                    target: Some(img),
                })
                .collect(),
            resample: ResampleSpec::new(1),
            extent: 1.0,
        };
        let objective = ObjectiveConfig {
            lambda_e: 1.0,
            lambda_tex: 0.0,
            ..Default::default()
        };
        let config = TrainConfig {
            iterations: 200,
            init_gaussians: 1,
            densify_from: 10_000,
            learning_rates: LearningRates {
                position_init: 1e-12,
                position_final: 1e-12,
                log_scale: 1e-12,
                rotation: 1e-12,
                opacity_logit: 1e-12,
                color: 2.5e-3,
            },
            ..Default::default()
        };
        let out = train_scene(
            start.clone(),
            &inputs,
            Supervision::Objective,
            &objective,
            &config,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.log.len(), 200);
        // Sum over one 3-view cycle is a full-batch loss; compare cycles 50 apart.
        let cycle = |k: usize| out.log[k..k + 3].iter().map(|r| r.loss.total).sum::<f64>();
        for k in (0..147).step_by(3) {
            assert!(cycle(k + 51) < cycle(k), "no decrease between {k} and {}", k + 51);
        }
        assert!(out.log[199].loss.total < out.log[0].loss.total);
        let p = |s: &GaussianScene| psnr(&render(s, &cams[0], 1.0).unwrap(), &hr[0]).unwrap();
        assert!(p(&out.scene) > p(&start));
    }

    #[test]
    fn zero_iterations_returns_initial_scene() {
        let (_, start, cams, hr) = toy_problem(true);
        let inputs = TrainInputs {
            views: vec![TrainView {
                id: 0,
                camera: &cams[0],
                lr: &hr[0],
                target: None,
            }],
            resample: ResampleSpec::new(1),
            extent: 1.0,
        };
        let config = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train_scene(
            start.clone(),
            &inputs,
            Supervision::RegOnly,
            &ObjectiveConfig::default(),
            &config,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.scene, start);
        assert!(out.log.is_empty());
    }

    #[test]
    fn missing_target_names_the_view() {
        let (_, start, cams, hr) = toy_problem(true);
        let inputs = TrainInputs {
            views: vec![TrainView {
                id: 5,
                camera: &cams[0],
                lr: &hr[0],
                target: None,
            }],
            resample: ResampleSpec::new(1),
            extent: 1.0,
        };
        let config = TrainConfig {
            iterations: 1,
            ..Default::default()
        };
        let err = train_scene(
            start,
            &inputs,
            Supervision::PriorOnly,
            &ObjectiveConfig::default(),
            &config,
            |_, _| Ok(()),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("view 5"), "{err}");
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let (_, mut start, cams, hr) = toy_problem(false);
        start.gaussians[0].color.x = f64::NAN;
        let inputs = TrainInputs {
            views: vec![TrainView {
                id: 0,
                camera: &cams[0],
                lr: &hr[0],
                target: Some(&hr[0]),
            }],
            resample: ResampleSpec::new(1),
            extent: 1.0,
        };
        let config = TrainConfig {
            iterations: 3,
            init_gaussians: 1,
            ..Default::default()
        };
        let err = train_scene(
            start,
            &inputs,
            Supervision::Objective,
            &ObjectiveConfig::default(),
            &config,
            |_, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}
