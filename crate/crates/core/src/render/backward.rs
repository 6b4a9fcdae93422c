use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::RenderPass;
use crate::image_ops::ImageBuffer;
use crate::scene::GaussianScene;

/// Per-Gaussian gradients, indexed like the scene's Gaussian list.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// `|dL/d mean2d|` in normalized device units (pixel gradient scaled by
    /// half the image extent), the densification statistic.
    pub mean2d_grad_norm: Vec<f64>,
    /// Whether the Gaussian's footprint overlapped the image.
    pub visible: Vec<bool>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            mean2d_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Flattened in scene order: position, log_scale, rotation, opacity, color
    /// (14 values per Gaussian).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 14);
        for i in 0..self.len() {
            out.extend(self.position[i].iter());
            out.extend(self.log_scale[i].iter());
            out.extend(self.rotation[i].iter());
            out.push(self.opacity_logit[i]);
            out.extend(self.color[i].iter());
        }
        out
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
}

pub(super) fn backward(pass: &RenderPass, scene: &GaussianScene, upstream: &ImageBuffer) -> RenderGradients {
    let splats = &pass.projection.gaussians;
    let mut acc = vec![SplatGrad::default(); splats.len()];
    let width = pass.image.width;

    // Color composited behind the current splat, including the background.
    let mut behind: Vec<Vector3<f64>> = pass.final_transmittance.iter().map(|&t| pass.background * t).collect();

    for c in pass.contributions.iter().rev() {
        let p = c.pixel as usize;
        let g = &splats[c.splat as usize];
        let up = Vector3::new(upstream.data[p * 3], upstream.data[p * 3 + 1], upstream.data[p * 3 + 2]);
        let w = c.alpha * c.transmittance;
        let a = &mut acc[c.splat as usize];
        a.color += up * w;

        let d_color_d_alpha = g.color * c.transmittance - behind[p] / (1.0 - c.alpha);
        let d_alpha = up.dot(&d_color_d_alpha);
        behind[p] += g.color * w;

        if c.saturated {
            continue;
        }
        a.opacity += d_alpha * c.gaussian;
        let d_g = d_alpha * g.opacity;
        let x = (p % width) as f64;
        let y = (p / width) as f64;
        let dx = x - g.mean2d.x;
        let dy = y - g.mean2d.y;
        let [ca, cb, cc] = g.conic;
        // d = pixel - mean, so d/dmean = -d/dd.
        a.mean2d.x += d_g * c.gaussian * (ca * dx + cb * dy);
        a.mean2d.y += d_g * c.gaussian * (cb * dx + cc * dy);
        a.conic[0] += -0.5 * d_g * c.gaussian * dx * dx;
        a.conic[1] += -d_g * c.gaussian * dx * dy;
        a.conic[2] += -0.5 * d_g * c.gaussian * dy * dy;
    }

    let n = scene.len();
    let mut out = RenderGradients::zeros(n);
    let k = &pass.projection.intrinsics;
    let w = &pass.projection.camera.rotation_w2c;
    let (half_w, half_h) = (0.5 * k.width as f64, 0.5 * k.height as f64);

    for (splat, a) in splats.iter().zip(&acc) {
        let i = splat.source;
        let params = &scene.gaussians[i];
        out.visible[i] = splat.pixel_bounds(k.width, k.height).is_some();
        out.mean2d_grad_norm[i] = Vector2::new(a.mean2d.x * half_w, a.mean2d.y * half_h).norm();

        out.color[i] = Vector3::from_fn(|ch, _| {
            let v = params.color[ch];
            if (0.0..=1.0).contains(&v) {
                a.color[ch]
            } else {
                0.0
            }
        });
        out.opacity_logit[i] = a.opacity * splat.opacity * (1.0 - splat.opacity);

        // conic = cov2d^-1: dL/dcov = -conic * G * conic with G the
        // symmetric-matrix gradient of the conic entries.
        let conic = Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
        let g_conic = Matrix2::new(a.conic[0], 0.5 * a.conic[1], 0.5 * a.conic[1], a.conic[2]);
        let g_cov2d = -(conic * g_conic * conic);

        // cov2d = J V J^T + dilation
        let j = &splat.jacobian;
        let g_view_cov: Matrix3<f64> = j.transpose() * g_cov2d * j;
        let g_jacobian: Matrix2x3<f64> = 2.0 * g_cov2d * j * splat.view_cov;

        // mean2d = (fx tx / tz + cx, fy ty / tz + cy); its Jacobian is J.
        let t = &splat.cam_point;
        let (fx, fy) = (k.fx, k.fy);
        let inv_z = 1.0 / t.z;
        let inv_z2 = inv_z * inv_z;
        let inv_z3 = inv_z2 * inv_z;
        let mut g_t = j.transpose() * a.mean2d;
        g_t.x += g_jacobian[(0, 2)] * (-fx * inv_z2);
        g_t.y += g_jacobian[(1, 2)] * (-fy * inv_z2);
        g_t.z += g_jacobian[(0, 0)] * (-fx * inv_z2)
            + g_jacobian[(1, 1)] * (-fy * inv_z2)
            + g_jacobian[(0, 2)] * (2.0 * fx * t.x * inv_z3)
            + g_jacobian[(1, 2)] * (2.0 * fy * t.y * inv_z3);
        out.position[i] = w.transpose() * g_t;

        // view_cov = W Sigma W^T, Sigma = M M^T, M = R S
        let g_sigma = w.transpose() * g_view_cov * w;
        let g_sigma = 0.5 * (g_sigma + g_sigma.transpose());
        let m = splat.rotation * Matrix3::from_diagonal(&splat.scale);
        let g_m = 2.0 * g_sigma * m;
        let rt_gm = splat.rotation.transpose() * g_m;
        out.log_scale[i] = Vector3::from_fn(|ax, _| rt_gm[(ax, ax)] * splat.scale[ax]);
        let g_r = g_m * Matrix3::from_diagonal(&splat.scale);
        out.rotation[i] = quaternion_grad(&splat.unit_quat, splat.quat_norm, &g_r);
    }
    out
}

/// Gradient with respect to the raw quaternion `q` given `dL/dR` for
/// `R = R(q / |q|)`.
fn quaternion_grad(u: &[f64; 4], norm: f64, g_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *u;
    let dot = |d: Matrix3<f64>| g_r.component_mul(&d).sum();
    let d_w = dot(Matrix3::new(
        0.0,
        -2.0 * z,
        2.0 * y,
        2.0 * z,
        0.0,
        -2.0 * x,
        -2.0 * y,
        2.0 * x,
        0.0,
    ));
    let d_x = dot(Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    ));
    let d_y = dot(Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    ));
    let d_z = dot(Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    ));
    let g_unit = [d_w, d_x, d_y, d_z];
    // Through the normalization u = q / |q|: (I - u u^T) g / |q|.
    let radial: f64 = (0..4).map(|k| u[k] * g_unit[k]).sum();
    [
        (g_unit[0] - u[0] * radial) / norm,
        (g_unit[1] - u[1] * radial) / norm,
        (g_unit[2] - u[2] * radial) / norm,
        (g_unit[3] - u[3] * radial) / norm,
    ]
}
