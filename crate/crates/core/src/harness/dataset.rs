//! Synthetic multi-view datasets: ground-truth scene, sphere cameras, HR
//! renders and the LR views formed from them.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::image_ops::{downsample, read_png, write_png, BitDepth, ImageBuffer, ResampleSpec, SSIM_WINDOW};
use crate::prior::PriorProvider;
use crate::render::render;
use crate::scene::{self, logit, Aabb, Camera, GaussianParams, GaussianScene};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_views: usize,
    pub hr_width: u32,
    pub hr_height: u32,
    pub factor: u32,
    /// Anti-aliased LR formation (kernel widened by the factor).
    pub antialias: bool,
    /// Ground-truth Gaussian count.
    pub gaussians: usize,
    /// Half-width of the cube holding the ground-truth scene.
    pub half_extent: f64,
    pub camera_distance: f64,
    /// Focal length as a multiple of the HR width.
    pub focal_factor: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_views: 16,
            hr_width: 128,
            hr_height: 128,
            factor: 4,
            antialias: true,
            gaussians: 2000,
            half_extent: 1.0,
            camera_distance: 4.0,
            focal_factor: 1.2,
            background: [0.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn resample(&self) -> ResampleSpec {
        ResampleSpec {
            factor: self.factor,
            antialias: self.antialias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_views < 4 {
            return Err(Error::Argument(format!(
                "num_views must be at least 4, got {}",
                self.num_views
            )));
        }
        if self.factor == 0 {
            return Err(Error::Argument("factor must be at least 1".into()));
        }
        let min_hr = (SSIM_WINDOW as u32) * self.factor;
        if self.hr_width < min_hr || self.hr_height < min_hr {
            return Err(Error::Argument(format!(
                "HR resolution {}x{} too small: SSIM needs at least {SSIM_WINDOW} LR pixels per side ({min_hr} HR at factor {})",
                self.hr_width, self.hr_height, self.factor
            )));
        }
        if !self.hr_width.is_multiple_of(self.factor) || !self.hr_height.is_multiple_of(self.factor) {
            return Err(Error::Argument(format!(
                "HR resolution must be divisible by the factor {}",
                self.factor
            )));
        }
        if !(self.half_extent > 0.0 && self.camera_distance > 2.0 * self.half_extent && self.focal_factor > 0.0) {
            return Err(Error::Argument("cameras must sit outside the scene cube".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub hr: Option<ImageBuffer>,
    pub lr: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub descriptor: String,
    pub bounds: Aabb,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub resample: ResampleSpec,
    pub meta: DatasetMeta,
}

/// Every 8th view (0, 8, 16, ...) is held out for testing.
pub fn split_indices(num_views: usize) -> (Vec<usize>, Vec<usize>) {
    (0..num_views).partition(|i| i % 8 != 0)
}

/// `n` points on a sphere band (|z| <= 0.8 r) in a Fibonacci spiral.
pub fn sphere_cameras(n: usize, distance: f64, focal: f64, width: u32, height: u32) -> Result<Vec<Camera>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 0.8 * (1.0 - (2 * i + 1) as f64 / n as f64);
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let eye = distance * Vector3::new(r * phi.cos(), r * phi.sin(), z);
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), focal, width, height, 0.1)
        })
        .collect()
}

/// Seeded random Gaussians with varied size, orientation and opacity.
pub fn synthetic_scene(count: usize, bounds: &Aabb, seed: u64, background: Vector3<f64>) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = (bounds.diagonal() / (count.max(1) as f64).cbrt() / 4.0).ln();
    let gaussians = (0..count)
        .map(|_| {
            let position = Vector3::from_fn(|k, _| rng.random_range(bounds.min[k]..bounds.max[k]));
            let log_scale = Vector3::from_fn(|_, _| base + rng.random_range(-0.6..0.4));
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let q = UnitQuaternion::from_scaled_axis(axis * std::f64::consts::PI);
            GaussianParams {
                position,
                log_scale,
                rotation: [q.w, q.i, q.j, q.k],
                opacity_logit: logit(rng.random_range(0.4..0.95)),
                color: Vector3::from_fn(|_, _| rng.random()),
            }
        })
        .collect();
    GaussianScene { gaussians, background }
}

/// Builds the ground-truth scene, renders HR views, forms LR views with the
/// declared downsampler and splits train/test.
pub fn generate_synthetic_dataset(cfg: &DatasetConfig) -> Result<(Dataset, GaussianScene)> {
    cfg.validate()?;
    let h = cfg.half_extent;
    let bounds = Aabb::new([-h; 3], [h; 3]);
    let background = Vector3::from(cfg.background);
    let truth = synthetic_scene(cfg.gaussians, &bounds, cfg.seed, background);
    let cameras = sphere_cameras(
        cfg.num_views,
        cfg.camera_distance,
        cfg.focal_factor * cfg.hr_width as f64,
        cfg.hr_width,
        cfg.hr_height,
    )?;
    let resample = cfg.resample();
    let views = cameras
        .into_iter()
        .map(|camera| {
            let hr = render(&truth, &camera, 1.0)?;
            let lr = downsample(&hr, &resample)?;
            Ok(View {
                camera,
                hr: Some(hr),
                lr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = split_indices(cfg.num_views);
    let dataset = Dataset {
        views,
        train,
        test,
        resample,
        meta: DatasetMeta {
            seed: cfg.seed,
            descriptor: format!("synthetic-random-{}", cfg.gaussians),
            bounds,
            background: cfg.background,
        },
    };
    Ok((dataset, truth))
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            let (w, h) = (v.camera.width as usize, v.camera.height as usize);
            let (lw, lh) = (self.resample.output_len(w), self.resample.output_len(h));
            if (v.lr.width, v.lr.height) != (lw, lh) {
                return Err(Error::Dimension(format!(
                    "view {i}: LR image is {}x{}, expected {lw}x{lh}",
                    v.lr.width, v.lr.height
                )));
            }
            if let Some(hr) = &v.hr {
                if (hr.width, hr.height) != (w, h) {
                    return Err(Error::Dimension(format!(
                        "view {i}: HR image is {}x{}, expected {w}x{h}",
                        hr.width, hr.height
                    )));
                }
            }
        }
        if self.train.iter().any(|i| self.test.contains(i)) {
            return Err(Error::Argument("train and test splits overlap".into()));
        }
        if let Some(&i) = self.train.iter().chain(&self.test).find(|&&i| i >= self.views.len()) {
            return Err(Error::Argument(format!(
                "split references view {i}, dataset has {}",
                self.views.len()
            )));
        }
        Ok(())
    }

    /// Oracle prior: the HR ground truth of every view that has one.
    pub fn oracle_provider(&self) -> PriorProvider {
        let hr: BTreeMap<usize, ImageBuffer> = self
            .views
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.hr.clone().map(|hr| (i, hr)))
            .collect();
        PriorProvider::Oracle {
            factor: self.resample.factor,
            hr,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    num_views: usize,
    train: Vec<usize>,
    test: Vec<usize>,
    resample: ResampleSpec,
    meta: DatasetMeta,
}

fn image_name(kind: &str, view: usize) -> String {
    format!("{kind}/{view:05}.png")
}

/// Writes `dataset.toml`, `cameras.toml` and 16-bit `hr/`, `lr/` PNGs.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let manifest = DatasetManifest {
        version: 1,
        num_views: dataset.views.len(),
        train: dataset.train.clone(),
        test: dataset.test.clone(),
        resample: dataset.resample,
        meta: dataset.meta.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Argument(format!("serializing dataset manifest: {e}")))?;
    write_atomic(&dir.join("dataset.toml"), text.as_bytes())?;
    let cameras: Vec<Camera> = dataset.views.iter().map(|v| v.camera).collect();
    scene::save_cameras(&cameras, &dir.join("cameras.toml"))?;
    for (i, v) in dataset.views.iter().enumerate() {
        write_png(&dir.join(image_name("lr", i)), &v.lr, BitDepth::Sixteen)?;
        if let Some(hr) = &v.hr {
            write_png(&dir.join(image_name("hr", i)), hr, BitDepth::Sixteen)?;
        }
    }
    Ok(())
}

/// Loads a dataset written by [`save_dataset`]; HR images are optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("dataset.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Load {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.version != 1 {
        return Err(Error::Load {
            what: path.display().to_string(),
            message: format!("unsupported dataset version {}", manifest.version),
        });
    }
    let cameras = scene::load_cameras(&dir.join("cameras.toml"))?;
    if cameras.len() != manifest.num_views {
        return Err(Error::Load {
            what: dir.display().to_string(),
            message: format!("{} cameras for {} views", cameras.len(), manifest.num_views),
        });
    }
    let views = cameras
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let lr = read_png(&dir.join(image_name("lr", i)))?;
            let hr_path = dir.join(image_name("hr", i));
            let hr = if hr_path.exists() {
                Some(read_png(&hr_path)?)
            } else {
                None
            };
            Ok(View { camera, hr, lr })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        views,
        train: manifest.train,
        test: manifest.test,
        resample: manifest.resample,
        meta: manifest.meta,
    };
    dataset.validate()?;
    Ok(dataset)
}
