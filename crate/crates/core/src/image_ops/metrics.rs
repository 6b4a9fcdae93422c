use super::resample::{AxisFilter, SeparableFilter};
use super::ImageBuffer;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_C1: f64 = SSIM_K1 * SSIM_K1;
pub const SSIM_C2: f64 = SSIM_K2 * SSIM_K2;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer, what: &str) -> Result<()> {
    a.check_same_dims(b, what)
}

/// Mean absolute difference over pixels and channels.
pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(l1_with_grad(a, b, None)?.0)
}

/// Weighted L1 and its gradient with respect to `a`.
///
/// With per-pixel `weights` the sum is renormalized by the total weight so an
/// all-ones mask gives the plain mean. An all-zero mask yields zero.
pub fn l1_with_grad(a: &ImageBuffer, b: &ImageBuffer, weights: Option<&[f64]>) -> Result<(f64, ImageBuffer)> {
    check_pair(a, b, "l1")?;
    pointwise_with_grad(a, b, weights, |d| (d.abs(), sign(d)))
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(mse_with_grad(a, b, None)?.0)
}

pub fn mse_with_grad(a: &ImageBuffer, b: &ImageBuffer, weights: Option<&[f64]>) -> Result<(f64, ImageBuffer)> {
    check_pair(a, b, "mse")?;
    pointwise_with_grad(a, b, weights, |d| (d * d, 2.0 * d))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pointwise_with_grad(
    a: &ImageBuffer,
    b: &ImageBuffer,
    weights: Option<&[f64]>,
    penalty: impl Fn(f64) -> (f64, f64),
) -> Result<(f64, ImageBuffer)> {
    let n = a.pixel_count();
    let norm = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Dimension(format!(
                    "mask has {} entries, image has {n} pixels",
                    w.len()
                )));
            }
            3.0 * w.iter().sum::<f64>()
        }
        None => 3.0 * n as f64,
    };
    let mut grad = ImageBuffer::new(a.width, a.height);
    if norm <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for p in 0..n {
        let w = weights.map_or(1.0, |w| w[p]);
        for c in 0..3 {
            let i = p * 3 + c;
            let (v, g) = penalty(a.data[i] - b.data[i]);
            total += w * v;
            grad.data[i] = w * g / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Anisotropic total variation `mean |dx| + mean |dy|` of `a` and its gradient.
pub fn total_variation_with_grad(a: &ImageBuffer) -> (f64, ImageBuffer) {
    let mut grad = ImageBuffer::new(a.width, a.height);
    let n = (a.pixel_count() * 3).max(1) as f64;
    let mut total = 0.0;
    for y in 0..a.height {
        for x in 0..a.width {
            for c in 0..3 {
                let i = a.index(x, y) + c;
                if x + 1 < a.width {
                    let j = a.index(x + 1, y) + c;
                    let d = a.data[j] - a.data[i];
                    total += d.abs();
                    grad.data[j] += sign(d) / n;
                    grad.data[i] -= sign(d) / n;
                }
                if y + 1 < a.height {
                    let j = a.index(x, y + 1) + c;
                    let d = a.data[j] - a.data[i];
                    total += d.abs();
                    grad.data[j] += sign(d) / n;
                    grad.data[i] -= sign(d) / n;
                }
            }
        }
    }
    (total / n, grad)
}

fn ssim_filter(width: usize, height: usize) -> SeparableFilter {
    let r = SSIM_WINDOW / 2;
    SeparableFilter {
        x: AxisFilter::gaussian_window(width, r, SSIM_SIGMA),
        y: AxisFilter::gaussian_window(height, r, SSIM_SIGMA),
    }
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(ssim_with_grad(a, b, None, false)?.0)
}

/// `(1 - ssim) / 2`
pub fn dssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// SSIM over an 11x11 Gaussian window (sigma 1.5, dynamic range 1) and,
/// optionally, its gradient with respect to `a`.
///
/// Window statistics use same-size output with clamp-to-edge padding. The
/// SSIM map is averaged over channels and then over pixels; with `weights`
/// the pixel average is weighted and renormalized by the total weight.
pub fn ssim_with_grad(
    a: &ImageBuffer,
    b: &ImageBuffer,
    weights: Option<&[f64]>,
    want_grad: bool,
) -> Result<(f64, Option<ImageBuffer>)> {
    check_pair(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let n = a.pixel_count();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension(format!(
                "mask has {} entries, image has {n} pixels",
                w.len()
            )));
        }
    }
    let filter = ssim_filter(a.width, a.height);
    let mu_a = filter.apply(a);
    let mu_b = filter.apply(b);
    let aa = filter.apply(&a.zip_map(a, |x, y| x * y));
    let bb = filter.apply(&b.zip_map(b, |x, y| x * y));
    let ab = filter.apply(&a.zip_map(b, |x, y| x * y));

    let total_weight = weights.map_or(n as f64, |w| w.iter().sum());
    if total_weight <= 0.0 {
        // Nothing supervised: report perfect similarity and no gradient.
        return Ok((1.0, want_grad.then(|| ImageBuffer::new(a.width, a.height))));
    }

    let len = a.data.len();
    let mut value = 0.0;
    let (mut d_mu, mut d_var, mut d_cov) = if want_grad {
        (vec![0.0; len], vec![0.0; len], vec![0.0; len])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let pw = weights.map_or(1.0, |w| w[p]);
        let mut pixel = 0.0;
        for c in 0..3 {
            let i = p * 3 + c;
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let var_a = aa.data[i] - ma * ma;
            let var_b = bb.data[i] - mb * mb;
            let cov = ab.data[i] - ma * mb;
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * cov + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = var_a + var_b + SSIM_C2;
            let s = (n1 * n2) / (d1 * d2);
            pixel += s;
            if want_grad {
                let k = pw / (3.0 * total_weight);
                let ds_dmu = (2.0 * mb * n2) / (d1 * d2) - s * 2.0 * ma / d1;
                let ds_dvar = -s / d2;
                let ds_dcov = 2.0 * n1 / (d1 * d2);
                // var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b
                d_mu[i] = k * (ds_dmu - 2.0 * ma * ds_dvar - mb * ds_dcov);
                d_var[i] = k * ds_dvar;
                d_cov[i] = k * ds_dcov;
            }
        }
        value += pw * pixel / 3.0;
    }
    value /= total_weight;

    let grad = want_grad.then(|| {
        let t = filter.transpose();
        let g_mu = t.apply(&ImageBuffer {
            width: a.width,
            height: a.height,
            data: d_mu,
        });
        let g_var = t.apply(&ImageBuffer {
            width: a.width,
            height: a.height,
            data: d_var,
        });
        let g_cov = t.apply(&ImageBuffer {
            width: a.width,
            height: a.height,
            data: d_cov,
        });
        let data = (0..len)
            .map(|i| g_mu.data[i] + 2.0 * a.data[i] * g_var.data[i] + b.data[i] * g_cov.data[i])
            .collect();
        ImageBuffer {
            width: a.width,
            height: a.height,
            data,
        }
    });
    Ok((value, grad))
}

/// Peak signal-to-noise ratio in dB for peak 1.0; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

/// Report formatting: infinite PSNR prints as the 99.99 dB sentinel.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "99.99".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _, _| rng.random())
    }

    #[test]
    fn l1_values() {
        let x = random_image(12, 12, 1);
        assert_eq!(l1(&x, &x).unwrap(), 0.0);
        let a = ImageBuffer::filled(5, 4, [0.5; 3]);
        let b = ImageBuffer::filled(5, 4, [0.25; 3]);
        assert_eq!(l1(&a, &b).unwrap(), 0.25);
        let (_, g) = l1_with_grad(&a, &b, None).unwrap();
        assert!(g.data.iter().all(|&v| v == 1.0 / 60.0));
        let (_, g) = l1_with_grad(&x, &x, None).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert!(l1(&a, &ImageBuffer::new(4, 4)).is_err());
    }

    #[test]
    fn l1_matches_direct_loop() {
        let a = random_image(17, 9, 2);
        let b = random_image(17, 9, 3);
        let mut sum = 0.0;
        for y in 0..9 {
            for x in 0..17 {
                let (pa, pb) = (a.get(x, y), b.get(x, y));
                for c in 0..3 {
                    sum += (pa[c] - pb[c]).abs();
                }
            }
        }
        assert!((l1(&a, &b).unwrap() - sum / (17.0 * 9.0 * 3.0)).abs() < 1e-14);
    }

    #[test]
    fn masked_l1_renormalizes() {
        let a = random_image(6, 6, 4);
        let b = random_image(6, 6, 5);
        let ones = vec![1.0; 36];
        assert!((l1_with_grad(&a, &b, Some(&ones)).unwrap().0 - l1(&a, &b).unwrap()).abs() < 1e-15);
        let twos = vec![2.0; 36];
        assert!((l1_with_grad(&a, &b, Some(&twos)).unwrap().0 - l1(&a, &b).unwrap()).abs() < 1e-15);
        let zeros = vec![0.0; 36];
        let (v, g) = l1_with_grad(&a, &b, Some(&zeros)).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = random_image(16, 16, 6);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(dssim(&x, &x).unwrap().abs() < 1e-12);

        let ones = ImageBuffer::filled(16, 16, [1.0; 3]);
        let zeros = ImageBuffer::new(16, 16);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&ones, &zeros).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        let a = random_image(10, 16, 1);
        assert!(ssim(&a, &a).is_err());
        let b = random_image(16, 16, 1);
        let c = random_image(17, 16, 1);
        assert!(ssim(&b, &c).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(16, 16, 7);
        let b = random_image(16, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        for weights in [None, Some(mask.as_slice())] {
            let (_, g) = ssim_with_grad(&a, &b, weights, true).unwrap();
            let g = g.unwrap();
            let h = 1e-6;
            for i in (0..a.data.len()).step_by(7) {
                let mut p = a.clone();
                p.data[i] += h;
                let mut m = a.clone();
                m.data[i] -= h;
                let fd = (ssim_with_grad(&p, &b, weights, false).unwrap().0
                    - ssim_with_grad(&m, &b, weights, false).unwrap().0)
                    / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(g.data[i].abs()) + 1e-9;
                assert!((fd - g.data[i]).abs() <= tol, "i={i}: fd {fd} vs {}", g.data[i]);
            }
        }
    }

    #[test]
    fn psnr_values() {
        let a = ImageBuffer::filled(4, 4, [0.5; 3]);
        let b = ImageBuffer::filled(4, 4, [0.6; 3]);
        // MSE = 0.01
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(f64::INFINITY), "99.99");
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let a = random_image(7, 5, 10);
        let (_, g) = total_variation_with_grad(&a);
        let h = 1e-7;
        for i in 0..a.data.len() {
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (total_variation_with_grad(&p).0 - total_variation_with_grad(&m).0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6);
        }
    }
}
