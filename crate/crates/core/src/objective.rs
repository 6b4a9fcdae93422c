//! Training objective: a prior term against pseudo-HR targets, a
//! render-and-downsample consistency term against the LR observation, and
//! their weighted combination.
//!
//! ```text
//! L       = lambda_e * s_p(it) * L_prior + (1 - lambda_e) * s_r(it) * L_reg
//! L_prior = (1 - lambda_tex) * P(pseudo_hr, render_hr) + lambda_tex * DSSIM(pseudo_hr, render_hr)
//! L_reg   = (1 - lambda_cvc) * P(lr, F(render_hr))     + lambda_cvc * DSSIM(lr, F(render_hr))
//! ```
//!
//! `P` is L1 by default, `F` the LR-formation downsampler, and `s_p`, `s_r`
//! optional iteration schedules (constant 1 unless configured).

use serde::{Deserialize, Serialize};

use crate::image_ops::{
    downsample, downsample_adjoint, l1_with_grad, mse_with_grad, ssim_with_grad, total_variation_with_grad,
    ImageBuffer, ResampleSpec, SSIM_WINDOW,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    #[default]
    L1,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    None,
    /// Keep pixels whose error lies below a percentile of the error map.
    ErrorPercentile,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "error-percentile" => Ok(MaskMode::ErrorPercentile),
            other => Err(Error::Argument(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mode: MaskMode,
    pub percentile: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::None,
            percentile: 100.0,
        }
    }
}

/// Piecewise-linear multiplier over iterations; constant outside the knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<(u64, f64)>);

impl Default for Schedule {
    fn default() -> Self {
        Schedule(vec![(0, 1.0)])
    }
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule(vec![(0, v)])
    }

    pub fn at(&self, iteration: u64) -> f64 {
        let knots = &self.0;
        match knots.iter().position(|&(it, _)| it > iteration) {
            None => knots.last().map_or(1.0, |k| k.1),
            Some(0) => knots[0].1,
            Some(j) => {
                let (i0, v0) = knots[j - 1];
                let (i1, v1) = knots[j];
                let r = (iteration - i0) as f64 / (i1 - i0) as f64;
                v0 + r * (v1 - v0)
            }
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Argument(format!("{name}: schedule needs at least one knot")));
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Argument(format!(
                "{name}: knot iterations must be strictly increasing"
            )));
        }
        if self.0.iter().any(|&(_, v)| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Argument(format!("{name}: multipliers must be finite and >= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationConfig {
    pub prior_weight_schedule: Schedule,
    pub reg_weight_schedule: Schedule,
    pub prior_mask: MaskConfig,
    pub reg_mask: MaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Balance between the prior term and the consistency term.
    pub lambda_e: f64,
    /// D-SSIM share of the prior term.
    pub lambda_tex: f64,
    /// D-SSIM share of the consistency term.
    pub lambda_cvc: f64,
    pub prior_penalty: Penalty,
    pub reg_penalty: Penalty,
    /// Weight of a total-variation penalty on the HR render, added to the
    /// prior term.
    pub tv_weight: f64,
    pub modulation: ModulationConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_e: 0.5,
            lambda_tex: 0.2,
            lambda_cvc: 0.2,
            prior_penalty: Penalty::L1,
            reg_penalty: Penalty::L1,
            tv_weight: 0.0,
            modulation: ModulationConfig::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_e", self.lambda_e),
            ("lambda_tex", self.lambda_tex),
            ("lambda_cvc", self.lambda_cvc),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::Argument("tv_weight must be >= 0".into()));
        }
        let m = &self.modulation;
        m.prior_weight_schedule.validate("prior_weight_schedule")?;
        m.reg_weight_schedule.validate("reg_weight_schedule")?;
        for (name, mask) in [("prior_mask", &m.prior_mask), ("reg_mask", &m.reg_mask)] {
            if !(mask.percentile > 0.0 && mask.percentile <= 100.0) {
                return Err(Error::Argument(format!("{name}.percentile must lie in (0, 100]")));
            }
        }
        Ok(())
    }

    /// Effective multipliers `(prior, reg)` at `iteration`.
    pub fn term_weights(&self, iteration: u64) -> (f64, f64) {
        (
            self.lambda_e * self.modulation.prior_weight_schedule.at(iteration),
            (1.0 - self.lambda_e) * self.modulation.reg_weight_schedule.at(iteration),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    /// Photometric penalty of the prior term (L1 unless configured as MSE).
    pub prior_l1: f64,
    pub prior_dssim: f64,
    pub prior_tv: f64,
    pub reg_l1: f64,
    pub reg_dssim: f64,
    pub masked_fraction_prior: f64,
    pub masked_fraction_reg: f64,
}

/// Value and image-space gradient of one term.
#[derive(Debug, Clone)]
pub struct TermLoss {
    pub value: f64,
    pub photometric: f64,
    pub dssim: f64,
    pub tv: f64,
    pub masked_fraction: f64,
    /// Gradient with respect to the HR render.
    pub grad: ImageBuffer,
}

fn photometric(
    penalty: Penalty,
    a: &ImageBuffer,
    b: &ImageBuffer,
    weights: Option<&[f64]>,
) -> Result<(f64, ImageBuffer)> {
    match penalty {
        Penalty::L1 => l1_with_grad(a, b, weights),
        Penalty::Mse => mse_with_grad(a, b, weights),
    }
}

/// `(1 - mix) * P(a, b) + mix * DSSIM(a, b)` with gradient with respect to `a`.
/// Returns `(value, P, DSSIM, gradient)`.
pub fn mixed_loss(
    penalty: Penalty,
    mix: f64,
    a: &ImageBuffer,
    b: &ImageBuffer,
    weights: Option<&[f64]>,
) -> Result<(f64, f64, f64, ImageBuffer)> {
    let (p, mut grad) = photometric(penalty, a, b, weights)?;
    // With the D-SSIM weight at zero, images below the window size are fine;
    // their D-SSIM is reported as 0.
    if mix == 0.0 && a.width.min(a.height) < SSIM_WINDOW {
        return Ok((p, p, 0.0, grad));
    }
    let (s, s_grad) = ssim_with_grad(a, b, weights, mix != 0.0)?;
    let dssim = (1.0 - s) / 2.0;
    let value = (1.0 - mix) * p + mix * dssim;
    grad.scale(1.0 - mix);
    if let Some(g) = s_grad {
        grad.add_scaled(&g, -0.5 * mix);
    }
    Ok((value, p, dssim, grad))
}

fn masked_fraction(mask: Option<&[f64]>) -> f64 {
    mask.map_or(0.0, |m| {
        m.iter().filter(|&&w| w == 0.0).count() as f64 / m.len().max(1) as f64
    })
}

/// Prior term between the HR render and the pseudo-HR target.
pub fn loss_prior(
    rendered_hr: &ImageBuffer,
    pseudo_hr: &ImageBuffer,
    cfg: &ObjectiveConfig,
    mask: Option<&[f64]>,
) -> Result<TermLoss> {
    rendered_hr.check_same_dims(pseudo_hr, "prior term: render vs pseudo-HR target")?;
    let (mut value, p, dssim, mut grad) = mixed_loss(cfg.prior_penalty, cfg.lambda_tex, rendered_hr, pseudo_hr, mask)?;
    let mut tv = 0.0;
    if cfg.tv_weight > 0.0 {
        let (t, g) = total_variation_with_grad(rendered_hr);
        tv = t;
        value += cfg.tv_weight * t;
        grad.add_scaled(&g, cfg.tv_weight);
    }
    Ok(TermLoss {
        value,
        photometric: p,
        dssim,
        tv,
        masked_fraction: masked_fraction(mask),
        grad,
    })
}

/// Consistency term between the downsampled HR render and the LR observation.
/// `mask` is given at LR resolution.
pub fn loss_reg(
    rendered_hr: &ImageBuffer,
    lr_observation: &ImageBuffer,
    resample: &ResampleSpec,
    cfg: &ObjectiveConfig,
    mask: Option<&[f64]>,
) -> Result<TermLoss> {
    let down = downsample(rendered_hr, resample)?;
    down.check_same_dims(lr_observation, "consistency term: downsampled render vs LR observation")?;
    let (value, p, dssim, grad_lr) = mixed_loss(cfg.reg_penalty, cfg.lambda_cvc, &down, lr_observation, mask)?;
    let grad = downsample_adjoint(&grad_lr, resample, rendered_hr.width, rendered_hr.height)?;
    Ok(TermLoss {
        value,
        photometric: p,
        dssim,
        tv: 0.0,
        masked_fraction: masked_fraction(mask),
        grad,
    })
}

/// `lambda_e * s_p(it) * prior + (1 - lambda_e) * s_r(it) * reg`
pub fn total_loss(prior_loss: f64, reg_loss: f64, cfg: &ObjectiveConfig, iteration: u64) -> f64 {
    let (wp, wr) = cfg.term_weights(iteration);
    wp * prior_loss + wr * reg_loss
}

/// Per-pixel weights from an error map.
///
/// `ErrorPercentile` keeps the `ceil(percentile / 100 * n)` lowest-error
/// pixels (ties broken by pixel index) and zeroes the rest.
pub fn build_mask(error_map: &[f64], mode: MaskMode, percentile: f64) -> Result<Vec<f64>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Argument(format!(
            "mask percentile must lie in (0, 100], got {percentile}"
        )));
    }
    let n = error_map.len();
    match mode {
        MaskMode::None => Ok(vec![1.0; n]),
        MaskMode::ErrorPercentile => {
            let keep = ((percentile / 100.0 * n as f64).ceil() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| error_map[a].total_cmp(&error_map[b]).then(a.cmp(&b)));
            let mut mask = vec![0.0; n];
            for &i in &order[..keep] {
                mask[i] = 1.0;
            }
            Ok(mask)
        }
    }
}

fn error_map(a: &ImageBuffer, b: &ImageBuffer) -> Vec<f64> {
    a.data
        .chunks_exact(3)
        .zip(b.data.chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs()) / 3.0)
        .collect()
}

fn term_mask(cfg: &MaskConfig, a: &ImageBuffer, b: &ImageBuffer) -> Result<Option<Vec<f64>>> {
    match cfg.mode {
        MaskMode::None => Ok(None),
        mode => build_mask(&error_map(a, b), mode, cfg.percentile).map(Some),
    }
}

/// Prior term with its configured mask.
pub fn prior_term(rendered_hr: &ImageBuffer, pseudo_hr: &ImageBuffer, cfg: &ObjectiveConfig) -> Result<TermLoss> {
    rendered_hr.check_same_dims(pseudo_hr, "prior term: render vs pseudo-HR target")?;
    let mask = term_mask(&cfg.modulation.prior_mask, rendered_hr, pseudo_hr)?;
    loss_prior(rendered_hr, pseudo_hr, cfg, mask.as_deref())
}

/// Consistency term with its configured mask (built at LR resolution).
pub fn reg_term(
    rendered_hr: &ImageBuffer,
    lr: &ImageBuffer,
    resample: &ResampleSpec,
    cfg: &ObjectiveConfig,
) -> Result<TermLoss> {
    let mask = match cfg.modulation.reg_mask.mode {
        MaskMode::None => None,
        _ => {
            let down = downsample(rendered_hr, resample)?;
            down.check_same_dims(lr, "consistency term: downsampled render vs LR observation")?;
            term_mask(&cfg.modulation.reg_mask, &down, lr)?
        }
    };
    loss_reg(rendered_hr, lr, resample, cfg, mask.as_deref())
}

/// Full objective at one iteration: report and gradient with respect to the
/// HR render. Terms whose effective weight is zero are not evaluated, so
/// `pseudo_hr` may be `None` when the prior weight is zero.
pub fn evaluate(
    rendered_hr: &ImageBuffer,
    pseudo_hr: Option<&ImageBuffer>,
    lr: &ImageBuffer,
    resample: &ResampleSpec,
    cfg: &ObjectiveConfig,
    iteration: u64,
) -> Result<(LossReport, ImageBuffer)> {
    let (wp, wr) = cfg.term_weights(iteration);
    let mut report = LossReport::default();
    let mut grad = ImageBuffer::new(rendered_hr.width, rendered_hr.height);
    let mut total = 0.0;
    if wp != 0.0 {
        let pseudo_hr =
            pseudo_hr.ok_or_else(|| Error::Argument("prior term has nonzero weight but no pseudo-HR target".into()))?;
        let t = prior_term(rendered_hr, pseudo_hr, cfg)?;
        report.prior_l1 = t.photometric;
        report.prior_dssim = t.dssim;
        report.prior_tv = t.tv;
        report.masked_fraction_prior = t.masked_fraction;
        total += wp * t.value;
        grad.add_scaled(&t.grad, wp);
    }
    if wr != 0.0 {
        let t = reg_term(rendered_hr, lr, resample, cfg)?;
        report.reg_l1 = t.photometric;
        report.reg_dssim = t.dssim;
        report.masked_fraction_reg = t.masked_fraction;
        total += wr * t.value;
        grad.add_scaled(&t.grad, wr);
    }
    report.total = total;
    Ok((report, grad))
}
