//! Differentiable splatting renderer.
//!
//! A render pass projects every Gaussian with the local affine (EWA)
//! approximation of perspective projection, sorts the splats by camera depth
//! (ties broken by source index) and composites them front to back. The
//! pass keeps a trace of every accepted (pixel, splat) contribution so that
//! [`RenderPass::backward`] can replay the compositing order in reverse and
//! produce exact gradients of the piecewise-smooth forward model.
//!
//! Everything runs on one thread; per-pixel compositing order and per-splat
//! gradient accumulation order are fixed, so results are bit-reproducible.

mod backward;
mod project;

pub use backward::RenderGradients;
pub use project::{project, ProjectedGaussian, Projection};

use nalgebra::Vector3;

use crate::image_ops::ImageBuffer;
use crate::scene::{Camera, GaussianScene};
use crate::{Error, Result};

/// Rasterization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    /// Added to both diagonal entries of every screen-space covariance (px^2).
    pub dilation: f64,
    /// Footprint half-extent in standard deviations of the major axis.
    pub cutoff_sigmas: f64,
    /// Splats whose per-pixel alpha falls below this are skipped.
    pub min_alpha: f64,
    /// Per-pixel alpha is capped here so `1 - alpha` never vanishes.
    pub max_alpha: f64,
    /// A pixel stops accepting splats once its transmittance drops below this.
    /// Zero disables early termination.
    pub min_transmittance: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            cutoff_sigmas: 3.0,
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.999,
            min_transmittance: 1e-4,
        }
    }
}

/// One accepted splat contribution at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Contribution {
    pub pixel: u32,
    /// Index into `Projection::gaussians`.
    pub splat: u32,
    pub alpha: f64,
    pub gaussian: f64,
    pub transmittance: f64,
    /// `alpha` hit `max_alpha`, so it no longer depends on the parameters.
    pub saturated: bool,
}

/// Contribution weights `w_i = alpha_i T_i` at one pixel, front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeights {
    /// `(source gaussian index, weight)`
    pub weights: Vec<(usize, f64)>,
    pub final_transmittance: f64,
}

/// Forward render state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RenderPass {
    pub projection: Projection,
    pub image: ImageBuffer,
    pub background: Vector3<f64>,
    pub(crate) contributions: Vec<Contribution>,
    pub(crate) final_transmittance: Vec<f64>,
    pub settings: RasterSettings,
}

impl RenderPass {
    pub fn forward(scene: &GaussianScene, camera: &Camera, scale: f64) -> Result<Self> {
        Self::forward_with(scene, camera, scale, &RasterSettings::default())
    }

    pub fn forward_with(scene: &GaussianScene, camera: &Camera, scale: f64, settings: &RasterSettings) -> Result<Self> {
        let projection = project::project_with(scene, camera, scale, settings)?;
        Ok(rasterize(projection, scene.background, settings))
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Gradients of `sum(upstream * image)` with respect to every parameter.
    pub fn backward(&self, scene: &GaussianScene, upstream: &ImageBuffer) -> Result<RenderGradients> {
        if !self.image.same_dims(upstream) {
            return Err(Error::Argument(format!(
                "upstream gradient is {}x{}, render is {}x{}",
                upstream.width, upstream.height, self.image.width, self.image.height
            )));
        }
        Ok(backward::backward(self, scene, upstream))
    }

    pub fn pixel_weights(&self, x: usize, y: usize) -> PixelWeights {
        let p = (y * self.image.width + x) as u32;
        let weights = self
            .contributions
            .iter()
            .filter(|c| c.pixel == p)
            .map(|c| {
                (
                    self.projection.gaussians[c.splat as usize].source,
                    c.alpha * c.transmittance,
                )
            })
            .collect();
        PixelWeights {
            weights,
            final_transmittance: self.final_transmittance[p as usize],
        }
    }

    /// The discrete structure of the pass: which splats were accepted at
    /// which pixels, in compositing order, and which were saturated. Two
    /// passes with equal signatures lie on the same smooth piece of the
    /// forward model.
    pub fn active_set_signature(&self) -> Vec<(u32, u32, bool)> {
        self.contributions
            .iter()
            .map(|c| {
                (
                    c.pixel,
                    self.projection.gaussians[c.splat as usize].source as u32,
                    c.saturated,
                )
            })
            .collect()
    }

    pub fn contribution_count(&self) -> usize {
        self.contributions.len()
    }
}

fn rasterize(projection: Projection, background: Vector3<f64>, settings: &RasterSettings) -> RenderPass {
    let (width, height) = (projection.intrinsics.width, projection.intrinsics.height);
    let n_pix = width * height;
    let mut transmittance = vec![1.0f64; n_pix];
    let mut done = vec![false; n_pix];
    let mut accum = vec![0.0f64; n_pix * 3];
    let mut contributions = Vec::new();

    // `projection.gaussians` is already in compositing order.
    for (k, g) in projection.gaussians.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = g.pixel_bounds(width, height) else {
            continue;
        };
        let [ca, cb, cc] = g.conic;
        for y in y0..=y1 {
            let dy = y as f64 - g.mean2d.y;
            for x in x0..=x1 {
                let p = y * width + x;
                if done[p] {
                    continue;
                }
                let dx = x as f64 - g.mean2d.x;
                let power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy);
                let gaussian = power.exp();
                let raw = g.opacity * gaussian;
                let saturated = raw >= settings.max_alpha;
                let alpha = if saturated { settings.max_alpha } else { raw };
                if alpha < settings.min_alpha {
                    continue;
                }
                let t = transmittance[p];
                let w = alpha * t;
                accum[p * 3] += w * g.color.x;
                accum[p * 3 + 1] += w * g.color.y;
                accum[p * 3 + 2] += w * g.color.z;
                contributions.push(Contribution {
                    pixel: p as u32,
                    splat: k as u32,
                    alpha,
                    gaussian,
                    transmittance: t,
                    saturated,
                });
                let next = t * (1.0 - alpha);
                transmittance[p] = next;
                if next < settings.min_transmittance {
                    done[p] = true;
                }
            }
        }
    }

    let mut image = ImageBuffer::new(width, height);
    for p in 0..n_pix {
        for c in 0..3 {
            image.data[p * 3 + c] = accum[p * 3 + c] + transmittance[p] * background[c];
        }
    }
    RenderPass {
        projection,
        image,
        background,
        contributions,
        final_transmittance: transmittance,
        settings: *settings,
    }
}

/// Renders `scene` from `camera` at resolution scale `scale`.
pub fn render(scene: &GaussianScene, camera: &Camera, scale: f64) -> Result<ImageBuffer> {
    Ok(RenderPass::forward(scene, camera, scale)?.image)
}

/// Gradients of `sum(upstream * render(scene, camera, scale))`.
pub fn render_backward(
    scene: &GaussianScene,
    camera: &Camera,
    scale: f64,
    upstream: &ImageBuffer,
) -> Result<RenderGradients> {
    RenderPass::forward(scene, camera, scale)?.backward(scene, upstream)
}

#[cfg(test)]
mod tests;
