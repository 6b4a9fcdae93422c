use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{logit, GaussianParams};

fn front_camera(size: u32, focal: f64) -> Camera {
    Camera {
        rotation_w2c: Matrix3::identity(),
        translation_w2c: Vector3::zeros(),
        focal: (focal, focal),
        principal_point: ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0),
        width: size,
        height: size,
        near_plane: 0.1,
    }
}

fn gaussian(position: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> GaussianParams {
    GaussianParams {
        position,
        log_scale: Vector3::repeat(sigma.ln()),
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: logit(opacity),
        color,
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let gaussians = (0..n)
        .map(|_| GaussianParams {
            position: Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(2.0..4.0),
            ),
            log_scale: Vector3::from_fn(|_, _| rng.random_range(-2.6..-1.6)),
            rotation: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            opacity_logit: rng.random_range(-1.5..1.5),
            color: Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
        })
        .collect();
    GaussianScene {
        gaussians,
        background: Vector3::new(0.2, 0.3, 0.1),
    }
}

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-0.15..0.15);
    let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    Camera {
        rotation_w2c: *rot.matrix(),
        translation_w2c: Vector3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.2..0.2),
        ),
        focal: (rng.random_range(18.0..26.0), rng.random_range(18.0..26.0)),
        principal_point: (rng.random_range(7.0..8.0), rng.random_range(7.0..8.0)),
        width: 16,
        height: 16,
        near_plane: 0.1,
    }
}

fn weighted_sum(img: &ImageBuffer, up: &ImageBuffer) -> f64 {
    img.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
}

fn param_mut(scene: &mut GaussianScene, i: usize, k: usize) -> &mut f64 {
    let g = &mut scene.gaussians[i];
    match k {
        0..=2 => &mut g.position[k],
        3..=5 => &mut g.log_scale[k - 3],
        6..=9 => &mut g.rotation[k - 6],
        10 => &mut g.opacity_logit,
        _ => &mut g.color[k - 11],
    }
}

#[test]
fn empty_scene_is_background() {
    let scene = GaussianScene::empty(Vector3::new(0.1, 0.5, 0.9));
    let img = render(&scene, &front_camera(8, 10.0), 1.0).unwrap();
    assert!(img.data.chunks(3).all(|p| p == [0.1, 0.5, 0.9]));
}

#[test]
fn non_positive_scale_is_rejected() {
    let scene = GaussianScene::default();
    assert!(render(&scene, &front_camera(8, 10.0), 0.0).is_err());
    assert!(project(&scene, &front_camera(8, 10.0), -2.0).is_err());
}

#[test]
fn behind_camera_is_culled() {
    let mut scene = GaussianScene::default();
    scene
        .gaussians
        .push(gaussian(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.9, Vector3::repeat(1.0)));
    scene
        .gaussians
        .push(gaussian(Vector3::new(0.0, 0.0, 0.05), 0.1, 0.9, Vector3::repeat(1.0)));
    scene
        .gaussians
        .push(gaussian(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.9, Vector3::repeat(1.0)));
    let proj = project(&scene, &front_camera(16, 20.0), 1.0).unwrap();
    assert_eq!(proj.index_map(), vec![2]);
    assert!(proj.gaussians.iter().all(|g| g.depth > 0.1));
}

#[test]
fn optical_axis_projects_to_principal_point() {
    let mut scene = GaussianScene::default();
    scene
        .gaussians
        .push(gaussian(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.5, Vector3::repeat(1.0)));
    let cam = front_camera(64, 50.0);
    for scale in [1.0, 0.5, 0.25] {
        let proj = project(&scene, &cam, scale).unwrap();
        let k = cam.at_scale(scale).unwrap();
        assert_eq!(proj.gaussians[0].mean2d.x, k.cx);
        assert_eq!(proj.gaussians[0].mean2d.y, k.cy);
    }
}

#[test]
fn cov2d_matches_finite_difference_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let scene = random_scene(&mut rng, 1);
        let cam = random_camera(&mut rng);
        let scale = rng.random_range(0.5..2.0);
        let proj = project(&scene, &cam, scale).unwrap();
        let g = &proj.gaussians[0];
        let k = cam.at_scale(scale).unwrap();
        let to_pixel = |p: Vector3<f64>| {
            let t = cam.rotation_w2c * p + cam.translation_w2c;
            (k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy)
        };
        let mu = scene.gaussians[0].position;
        let h = 1e-6;
        let mut jac = Matrix2x3::zeros();
        for ax in 0..3 {
            let mut e = Vector3::zeros();
            e[ax] = h;
            let (px, py) = to_pixel(mu + e);
            let (mx, my) = to_pixel(mu - e);
            jac[(0, ax)] = (px - mx) / (2.0 * h);
            jac[(1, ax)] = (py - my) / (2.0 * h);
        }
        let sigma = scene.gaussians[0].covariance().unwrap();
        let mut oracle = jac * sigma * jac.transpose();
        oracle[(0, 0)] += 0.3;
        oracle[(1, 1)] += 0.3;
        let rel = (g.cov2d - oracle).abs().max() / oracle.abs().max();
        assert!(rel < 1e-4, "relative error {rel}");
        assert!(g.cov2d.determinant() > 0.0);
        let lmax = nalgebra::SymmetricEigen::new(g.cov2d).eigenvalues.max();
        assert!((g.radius - 3.0 * lmax.sqrt()).abs() < 1e-9);
    }
}

/// Direct evaluation of one pixel: independent projection, sort and
/// compositing loop with no early termination.
fn composite_pixel_oracle(scene: &GaussianScene, cam: &Camera, x: f64, y: f64) -> Vector3<f64> {
    let mut splats: Vec<(f64, usize, f64, Vector3<f64>)> = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let t = cam.rotation_w2c * g.position + cam.translation_w2c;
        let (fx, fy) = cam.focal;
        let (u, v) = (
            fx * t.x / t.z + cam.principal_point.0,
            fy * t.y / t.z + cam.principal_point.1,
        );
        let j = Matrix2x3::new(
            fx / t.z,
            0.0,
            -fx * t.x / (t.z * t.z),
            0.0,
            fy / t.z,
            -fy * t.y / (t.z * t.z),
        );
        let s = g.covariance().unwrap();
        let mut c = j * cam.rotation_w2c * s * cam.rotation_w2c.transpose() * j.transpose();
        c[(0, 0)] += 0.3;
        c[(1, 1)] += 0.3;
        let inv = c.try_inverse().unwrap();
        let d = nalgebra::Vector2::new(x - u, y - v);
        let gval = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
        splats.push((t.z, i, (g.opacity() * gval).min(0.999), g.color));
    }
    splats.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut t = 1.0;
    let mut out = Vector3::zeros();
    for (_, _, alpha, color) in splats {
        if alpha < 1.0 / 255.0 {
            continue;
        }
        out += color * alpha * t;
        t *= 1.0 - alpha;
    }
    out + scene.background * t
}

#[test]
fn single_gaussian_center_pixel() {
    // Footprint sigma of 2 px: world sigma * focal / depth = 2 (before dilation).
    let cam = front_camera(33, 40.0);
    let mut scene = GaussianScene::default();
    scene
        .gaussians
        .push(gaussian(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.8, Vector3::repeat(1.0)));
    let img = render(&scene, &cam, 1.0).unwrap();
    let center = img.get(16, 16);
    let oracle = composite_pixel_oracle(&scene, &cam, 16.0, 16.0);
    for c in 0..3 {
        assert!((center[c] - 0.8).abs() < 1e-10);
        assert!((center[c] - oracle[c]).abs() < 1e-10);
    }
    for (x, y) in [(10, 16), (16, 20), (13, 19), (30, 2)] {
        let o = composite_pixel_oracle(&scene, &cam, x as f64, y as f64);
        let r = img.get(x, y);
        if o[0] > 1.0 / 255.0 * 0.8 {
            assert!((r[0] - o[0]).abs() < 1e-10, "({x},{y}) {} vs {}", r[0], o[0]);
        }
    }
}

#[test]
fn two_gaussian_front_to_back() {
    let cam = front_camera(33, 40.0);
    let mut scene = GaussianScene {
        background: Vector3::new(0.0, 0.0, 1.0),
        ..Default::default()
    };
    // Same footprint: world sigma scales with depth.
    scene.gaussians.push(gaussian(
        Vector3::new(0.0, 0.0, 2.0),
        0.1,
        0.5,
        Vector3::new(0.0, 1.0, 0.0),
    ));
    scene.gaussians.push(gaussian(
        Vector3::new(0.0, 0.0, 1.0),
        0.05,
        0.5,
        Vector3::new(1.0, 0.0, 0.0),
    ));
    let img = render(&scene, &cam, 1.0).unwrap();
    let expected = [0.5, 0.25, 0.25];
    let oracle = composite_pixel_oracle(&scene, &cam, 16.0, 16.0);
    let got = img.get(16, 16);
    for c in 0..3 {
        assert!((got[c] - expected[c]).abs() < 1e-12);
        assert!((got[c] - oracle[c]).abs() < 1e-12);
    }
}

#[test]
fn random_pixels_match_compositing_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let scene = random_scene(&mut rng, 5);
        let mut cam = front_camera(16, 22.0);
        cam.principal_point = (7.5, 7.5);
        let pass = RenderPass::forward_with(
            &scene,
            &cam,
            1.0,
            &RasterSettings {
                min_transmittance: 0.0,
                cutoff_sigmas: 50.0,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..10 {
            let (x, y) = (rng.random_range(0..16), rng.random_range(0..16));
            let o = composite_pixel_oracle(&scene, &cam, x as f64, y as f64);
            let r = pass.image.get(x, y);
            for c in 0..3 {
                assert!((r[c] - o[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn weights_plus_transmittance_conserve() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let settings = RasterSettings {
        min_transmittance: 0.0,
        ..Default::default()
    };
    for _ in 0..10 {
        let scene = random_scene(&mut rng, 5);
        let pass = RenderPass::forward_with(&scene, &random_camera(&mut rng), 1.0, &settings).unwrap();
        for _ in 0..20 {
            let pw = pass.pixel_weights(rng.random_range(0..16), rng.random_range(0..16));
            let total: f64 = pw.weights.iter().map(|(_, w)| w).sum::<f64>() + pw.final_transmittance;
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn early_stop_keeps_sum_bounded() {
    let cam = front_camera(16, 20.0);
    let mut scene = GaussianScene::default();
    for k in 0..12 {
        scene.gaussians.push(gaussian(
            Vector3::new(0.0, 0.0, 2.0 + 0.1 * k as f64),
            0.3,
            0.99,
            Vector3::repeat(0.5),
        ));
    }
    let pass = RenderPass::forward(&scene, &cam, 1.0).unwrap();
    let pw = pass.pixel_weights(8, 8);
    assert!(pw.weights.len() < 12);
    assert!(pw.final_transmittance < 1e-4);
    let total: f64 = pw.weights.iter().map(|(_, w)| w).sum::<f64>() + pw.final_transmittance;
    assert!((1.0 - 1e-4..=1.0 + 1e-12).contains(&total));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = random_scene(&mut rng, 4);
    let cam = random_camera(&mut rng);
    let grads = render_backward(&scene, &cam, 1.0, &ImageBuffer::new(16, 16)).unwrap();
    assert!(grads.flatten().iter().all(|&v| v == 0.0));
    assert!(render_backward(&scene, &cam, 1.0, &ImageBuffer::new(8, 16)).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-4;
    let mut checked = 0;
    while checked < 15 {
        let n = rng.random_range(1..=5);
        let scene = random_scene(&mut rng, n);
        let cam = random_camera(&mut rng);
        let up = ImageBuffer::from_fn(16, 16, |_, _, _| rng.random_range(-1.0..1.0));
        let pass = RenderPass::forward(&scene, &cam, 1.0).unwrap();
        let analytic = pass.backward(&scene, &up).unwrap().flatten();
        let base = pass.active_set_signature();
        let mut smooth = true;
        let mut pairs = Vec::new();
        for i in 0..n {
            for k in 0..14 {
                let mut plus = scene.clone();
                *param_mut(&mut plus, i, k) += h;
                let mut minus = scene.clone();
                *param_mut(&mut minus, i, k) -= h;
                let pp = RenderPass::forward(&plus, &cam, 1.0).unwrap();
                let pm = RenderPass::forward(&minus, &cam, 1.0).unwrap();
                if pp.active_set_signature() != base || pm.active_set_signature() != base {
                    smooth = false;
                    break;
                }
                let fd = (weighted_sum(&pp.image, &up) - weighted_sum(&pm.image, &up)) / (2.0 * h);
                pairs.push((i, k, fd, analytic[i * 14 + k]));
            }
        }
        if !smooth {
            continue;
        }
        for (i, k, fd, an) in pairs {
            let tol = (1e-3 * fd.abs().max(an.abs())).max(1e-6);
            assert!((fd - an).abs() <= tol, "gaussian {i} param {k}: fd {fd} analytic {an}");
        }
        checked += 1;
    }
}

#[test]
fn occluded_gaussian_has_no_color_gradient() {
    let cam = front_camera(16, 20.0);
    let mut scene = GaussianScene::default();
    // Per-splat alpha is capped at 0.999, so two saturated layers are needed
    // to push transmittance under the termination threshold.
    for depth in [1.0, 1.1] {
        let mut front = gaussian(Vector3::new(0.0, 0.0, depth), 5.0, 0.5, Vector3::repeat(0.3));
        front.opacity_logit = 20.0;
        scene.gaussians.push(front);
    }
    scene
        .gaussians
        .push(gaussian(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.9, Vector3::repeat(0.6)));
    let up = ImageBuffer::filled(16, 16, [1.0, -0.5, 0.25]);
    let grads = render_backward(&scene, &cam, 1.0, &up).unwrap();
    assert!(grads.color[2].norm() < 1e-6, "{}", grads.color[2]);
    let h = 1e-4;
    for c in 0..3 {
        let mut p = scene.clone();
        p.gaussians[2].color[c] += h;
        let mut m = scene.clone();
        m.gaussians[2].color[c] -= h;
        let fd = (weighted_sum(&render(&p, &cam, 1.0).unwrap(), &up)
            - weighted_sum(&render(&m, &cam, 1.0).unwrap(), &up))
            / (2.0 * h);
        assert!(fd.abs() < 1e-6);
    }
}

#[test]
fn permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let scene = random_scene(&mut rng, 5);
        let cam = random_camera(&mut rng);
        let up = ImageBuffer::from_fn(16, 16, |_, _, _| rng.random_range(-1.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let permuted = GaussianScene {
            gaussians: perm.iter().map(|&i| scene.gaussians[i]).collect(),
            background: scene.background,
        };
        let a = RenderPass::forward(&scene, &cam, 1.0).unwrap();
        let b = RenderPass::forward(&permuted, &cam, 1.0).unwrap();
        assert_eq!(a.image, b.image);
        let ga = a.backward(&scene, &up).unwrap();
        let gb = b.backward(&permuted, &up).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(ga.position[src], gb.position[slot]);
            assert_eq!(ga.rotation[src], gb.rotation[slot]);
            assert_eq!(ga.log_scale[src], gb.log_scale[slot]);
            assert_eq!(ga.opacity_logit[src], gb.opacity_logit[slot]);
            assert_eq!(ga.color[src], gb.color[slot]);
        }
    }
}

#[test]
fn intrinsics_rescaling_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scene = random_scene(&mut rng, 5);
    let full = front_camera(32, 44.0);
    let half = Camera {
        focal: (22.0, 22.0),
        principal_point: (
            (full.principal_point.0 + 0.5) / 2.0 - 0.5,
            (full.principal_point.1 + 0.5) / 2.0 - 0.5,
        ),
        width: 16,
        height: 16,
        ..full
    };
    let a = render(&scene, &full, 1.0).unwrap();
    let b = render(&scene, &half, 2.0).unwrap();
    assert!(a.same_dims(&b));
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn output_stays_in_unit_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut scene = random_scene(&mut rng, 5);
    scene.gaussians[0].color = Vector3::new(3.0, -2.0, 0.5);
    let img = render(&scene, &random_camera(&mut rng), 1.0).unwrap();
    assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn repeated_passes_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let scene = random_scene(&mut rng, 5);
    let cam = random_camera(&mut rng);
    let up = ImageBuffer::from_fn(16, 16, |_, _, _| rng.random_range(-1.0..1.0));
    let a = render_backward(&scene, &cam, 1.0, &up).unwrap();
    let b = render_backward(&scene, &cam, 1.0, &up).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
}
