use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::RasterSettings;
use crate::scene::{normalize_quaternion, rotation_from_unit_quaternion, Camera, GaussianScene, ScaledIntrinsics};
use crate::Result;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Index of the Gaussian in the scene.
    pub source: usize,
    pub mean2d: Vector2<f64>,
    /// Dilated screen-space covariance.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Shading color, clamped to `[0, 1]`.
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub radius: f64,

    // Intermediates reused by the backward pass.
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) view_cov: Matrix3<f64>,
    pub(crate) rotation: Matrix3<f64>,
    pub(crate) unit_quat: [f64; 4],
    pub(crate) quat_norm: f64,
    pub(crate) scale: Vector3<f64>,
}

impl ProjectedGaussian {
    /// Inclusive pixel box covered by the footprint, clipped to the image.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = (self.mean2d.x - self.radius).ceil().max(0.0);
        let x1 = (self.mean2d.x + self.radius).floor().min(width as f64 - 1.0);
        let y0 = (self.mean2d.y - self.radius).ceil().max(0.0);
        let y1 = (self.mean2d.y + self.radius).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }
}

/// All Gaussians in front of the near plane, in compositing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub intrinsics: ScaledIntrinsics,
    pub camera: Camera,
    pub gaussians: Vec<ProjectedGaussian>,
}

impl Projection {
    /// Source index of each projected Gaussian.
    pub fn index_map(&self) -> Vec<usize> {
        self.gaussians.iter().map(|g| g.source).collect()
    }
}

pub fn project(scene: &GaussianScene, camera: &Camera, scale: f64) -> Result<Projection> {
    project_with(scene, camera, scale, &RasterSettings::default())
}

pub(crate) fn project_with(
    scene: &GaussianScene,
    camera: &Camera,
    scale: f64,
    settings: &RasterSettings,
) -> Result<Projection> {
    let k = camera.at_scale(scale)?;
    let w = camera.rotation_w2c;
    let mut gaussians = Vec::with_capacity(scene.len());
    for (source, g) in scene.gaussians.iter().enumerate() {
        let t = w * g.position + camera.translation_w2c;
        if t.z <= camera.near_plane {
            continue;
        }
        let q = normalize_quaternion(&g.rotation)?;
        let quat_norm = g.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        let rotation = rotation_from_unit_quaternion(&q);
        let scale = g.scale();
        let m = rotation * Matrix3::from_diagonal(&scale);
        let sigma = m * m.transpose();
        let view_cov = w * sigma * w.transpose();

        let inv_z = 1.0 / t.z;
        let jacobian = Matrix2x3::new(
            k.fx * inv_z,
            0.0,
            -k.fx * t.x * inv_z * inv_z,
            0.0,
            k.fy * inv_z,
            -k.fy * t.y * inv_z * inv_z,
        );
        let mut cov2d = jacobian * view_cov * jacobian.transpose();
        cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(1, 0)] = cov2d[(0, 1)];
        cov2d[(0, 0)] += settings.dilation;
        cov2d[(1, 1)] += settings.dilation;

        let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) {
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let radius = settings.cutoff_sigmas * lambda_max.sqrt();

        gaussians.push(ProjectedGaussian {
            source,
            mean2d: Vector2::new(k.fx * t.x * inv_z + k.cx, k.fy * t.y * inv_z + k.cy),
            cov2d,
            conic,
            depth: t.z,
            color: g.color.map(|v| v.clamp(0.0, 1.0)),
            opacity: g.opacity(),
            radius,
            cam_point: t,
            jacobian,
            view_cov,
            rotation,
            unit_quat: q,
            quat_norm,
            scale,
        });
    }
    gaussians.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    Ok(Projection {
        intrinsics: k,
        camera: *camera,
        gaussians,
    })
}
