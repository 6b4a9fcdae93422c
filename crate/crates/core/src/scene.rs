//! Scene representation: anisotropic Gaussians, pinhole cameras, and their
//! text file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SCENE_MAGIC: &str = "srgs-scene";
const SCENE_VERSION: u32 = 1;

/// Learnable parameters of one Gaussian.
///
/// Scale is stored as a log standard deviation and opacity as a logit so
/// that every field is unconstrained during optimization. The rotation is a
/// `(w, x, y, z)` quaternion that is normalized whenever it is read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianParams {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_params(&self.log_scale, &self.rotation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<GaussianParams>,
    pub background: Vector3<f64>,
}

impl Default for GaussianScene {
    fn default() -> Self {
        Self::empty(Vector3::zeros())
    }
}

impl GaussianScene {
    pub fn empty(background: Vector3<f64>) -> Self {
        Self {
            gaussians: Vec::new(),
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalizes a `(w, x, y, z)` quaternion, failing on zero length.
pub fn normalize_quaternion(q: &[f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm])
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
pub fn rotation_from_unit_quaternion(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(exp(2 s)) R^T` with `R` from the normalized quaternion.
pub fn covariance_from_params(log_scale: &Vector3<f64>, rotation: &[f64; 4]) -> Result<Matrix3<f64>> {
    let q = normalize_quaternion(rotation)?;
    let r = rotation_from_unit_quaternion(&q);
    let m = r * Matrix3::from_diagonal(&log_scale.map(f64::exp));
    let sigma = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    Ok((sigma + sigma.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Uniformly placed, isotropic, half-opaque Gaussians with random colors.
pub fn init_scene_random(count: usize, bounds: &Aabb, seed: u64, background: Vector3<f64>) -> Result<GaussianScene> {
    if count == 0 {
        return Err(Error::Argument("init_scene_random: count must be at least 1".into()));
    }
    if (0..3).any(|k| !(bounds.max[k] > bounds.min[k])) {
        return Err(Error::Argument("init_scene_random: degenerate bounds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = bounds.diagonal() / (count as f64).cbrt() / 4.0;
    let log_sigma = sigma.ln();
    let gaussians = (0..count)
        .map(|_| {
            let position = Vector3::from_fn(|k, _| rng.random_range(bounds.min[k]..bounds.max[k]));
            let color = Vector3::from_fn(|_, _| rng.random::<f64>());
            GaussianParams {
                position,
                log_scale: Vector3::repeat(log_sigma),
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: logit(0.5),
                color,
            }
        })
        .collect();
    Ok(GaussianScene { gaussians, background })
}

fn fmt_f64(out: &mut String, v: f64) {
    // 17 significant digits round-trips every finite f64.
    let _ = write!(out, "{v:.16e}");
}

pub fn scene_to_string(scene: &GaussianScene) -> String {
    let mut out = String::new();
    let _ = write!(out, "{SCENE_MAGIC} {SCENE_VERSION} {}", scene.len());
    for c in scene.background.iter() {
        out.push(' ');
        fmt_f64(&mut out, *c);
    }
    out.push('\n');
    for g in &scene.gaussians {
        let fields = g
            .position
            .iter()
            .chain(g.log_scale.iter())
            .chain(g.rotation.iter())
            .chain(std::iter::once(&g.opacity_logit))
            .chain(g.color.iter());
        for (k, v) in fields.enumerate() {
            if k > 0 {
                out.push(' ');
            }
            fmt_f64(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

const GAUSSIAN_FIELDS: [&str; 14] = [
    "position.x",
    "position.y",
    "position.z",
    "log_scale.x",
    "log_scale.y",
    "log_scale.z",
    "rotation.w",
    "rotation.x",
    "rotation.y",
    "rotation.z",
    "opacity_logit",
    "color.r",
    "color.g",
    "color.b",
];

pub fn scene_from_str(text: &str, path: &Path) -> Result<GaussianScene> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file, expected header".into()))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 6 || tokens[0] != SCENE_MAGIC {
        return Err(err(
            1,
            format!("expected `{SCENE_MAGIC} <version> <count> <r> <g> <b>`"),
        ));
    }
    let version: u32 = tokens[1]
        .parse()
        .map_err(|_| err(1, format!("bad version `{}`", tokens[1])))?;
    if version != SCENE_VERSION {
        return Err(err(1, format!("unsupported version {version}")));
    }
    let count: usize = tokens[2]
        .parse()
        .map_err(|_| err(1, format!("bad count `{}`", tokens[2])))?;
    let mut background = Vector3::zeros();
    for k in 0..3 {
        background[k] = tokens[3 + k]
            .parse()
            .map_err(|_| err(1, format!("bad background component `{}`", tokens[3 + k])))?;
    }

    let mut gaussians = Vec::with_capacity(count);
    for idx in 0..count {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| err(idx + 2, format!("truncated: expected {count} gaussians, found {idx}")))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != GAUSSIAN_FIELDS.len() {
            return Err(err(
                line_no,
                format!("expected {} fields, found {}", GAUSSIAN_FIELDS.len(), tokens.len()),
            ));
        }
        let mut v = [0.0f64; 14];
        for (k, tok) in tokens.iter().enumerate() {
            v[k] = tok.parse().map_err(|_| {
                err(
                    line_no,
                    format!("field {} is not a number: `{tok}`", GAUSSIAN_FIELDS[k]),
                )
            })?;
        }
        gaussians.push(GaussianParams {
            position: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    if let Some((line_no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(line_no, format!("unexpected trailing content `{}`", extra.trim())));
    }
    Ok(GaussianScene { gaussians, background })
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    crate::harness::write_atomic(path, scene_to_string(scene).as_bytes())
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_str(&text, path)
}

/// Pinhole camera in the OpenCV convention (x right, y down, z forward).
///
/// Intrinsics are declared at the reference resolution. Pixel centers sit at
/// integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation_w2c: Matrix3<f64>,
    pub translation_w2c: Vector3<f64>,
    pub focal: (f64, f64),
    pub principal_point: (f64, f64),
    pub width: u32,
    pub height: u32,
    pub near_plane: f64,
}

/// Camera intrinsics resolved at a particular render scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` roughly opposite to
    /// the image y axis.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        near_plane: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Argument("look_at: eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Argument("look_at: up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation_w2c = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let camera = Self {
            rotation_w2c,
            translation_w2c: -(rotation_w2c * eye),
            focal: (focal, focal),
            principal_point: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            width,
            height,
            near_plane,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation_w2c.transpose() * self.rotation_w2c;
        let dev = (gram - Matrix3::identity()).abs().max();
        if !(dev <= 1e-9) {
            return Err(Error::Argument(format!(
                "camera rotation is not orthonormal (max |R^T R - I| = {dev:e})"
            )));
        }
        if !(self.near_plane > 0.0) {
            return Err(Error::Argument("camera near_plane must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("camera width and height must be at least 1".into()));
        }
        Ok(())
    }

    /// Intrinsics and image size at render scale `s`.
    pub fn at_scale(&self, scale: f64) -> Result<ScaledIntrinsics> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Argument(format!("render scale must be positive, got {scale}")));
        }
        let width = (self.width as f64 * scale).round().max(1.0) as usize;
        let height = (self.height as f64 * scale).round().max(1.0) as usize;
        Ok(ScaledIntrinsics {
            fx: self.focal.0 * scale,
            fy: self.focal.1 * scale,
            cx: (self.principal_point.0 + 0.5) * scale - 0.5,
            cy: (self.principal_point.1 + 0.5) * scale - 0.5,
            width,
            height,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_w2c.transpose() * self.translation_w2c)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    rotation_w2c: [[f64; 3]; 3],
    translation_w2c: [f64; 3],
    focal: [f64; 2],
    principal_point: [f64; 2],
    width: u32,
    height: u32,
    near_plane: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    camera: Vec<CameraRecord>,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation_w2c;
        Self {
            rotation_w2c: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation_w2c: [c.translation_w2c.x, c.translation_w2c.y, c.translation_w2c.z],
            focal: [c.focal.0, c.focal.1],
            principal_point: [c.principal_point.0, c.principal_point.1],
            width: c.width,
            height: c.height,
            near_plane: c.near_plane,
        }
    }
}

impl From<&CameraRecord> for Camera {
    fn from(r: &CameraRecord) -> Self {
        let m = &r.rotation_w2c;
        Self {
            rotation_w2c: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation_w2c: Vector3::from(r.translation_w2c),
            focal: (r.focal[0], r.focal[1]),
            principal_point: (r.principal_point[0], r.principal_point[1]),
            width: r.width,
            height: r.height,
            near_plane: r.near_plane,
        }
    }
}

pub fn cameras_to_string(cameras: &[Camera]) -> String {
    let file = CameraFile {
        camera: cameras.iter().map(CameraRecord::from).collect(),
    };
    toml::to_string(&file).expect("camera records always serialize")
}

pub fn cameras_from_str(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let file: CameraFile = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0);
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.message().to_string(),
        }
    })?;
    file.camera
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let cam = Camera::from(rec);
            cam.validate().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("camera {i}: {e}"),
            })?;
            Ok(cam)
        })
        .collect()
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    crate::harness::write_atomic(path, cameras_to_string(cameras).as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_str(&text, path)
}
