use super::ImageBuffer;
use crate::{Error, Result};

/// Keys cubic convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Keys cubic kernel with `a = -0.5`, support `[-2, 2]`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic resampling configuration for the LR formation operator.
///
/// Destination pixel `x` samples source coordinate `(x + 0.5) * factor - 0.5`,
/// borders clamp to the edge and every output's weights are renormalized to
/// sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResampleSpec {
    pub factor: u32,
    /// Stretch the kernel support by `factor` when downsampling.
    pub antialias: bool,
}

impl ResampleSpec {
    pub fn new(factor: u32) -> Self {
        Self {
            factor,
            antialias: true,
        }
    }

    fn check(&self) -> Result<()> {
        if self.factor < 1 {
            return Err(Error::Argument(format!(
                "resample factor must be >= 1, got {}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn output_len(&self, input: usize) -> usize {
        ((input as f64 / self.factor as f64).round() as usize).max(1)
    }
}

/// Sparse linear map along one image axis: `out[i] = sum_j w_ij in[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFilter {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisFilter {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    fn from_kernel(in_len: usize, out_len: usize, mut taps_for: impl FnMut(usize) -> (f64, i64, i64, f64)) -> Self {
        // taps_for(out) -> (center, first, last, kernel stretch)
        let taps = (0..out_len)
            .map(|o| {
                let (center, first, last, stretch) = taps_for(o);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity((last - first + 1) as usize);
                for i in first..=last {
                    let w = cubic_kernel((i as f64 - center) / stretch);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = i.clamp(0, in_len as i64 - 1) as usize;
                    match row.iter_mut().find(|(j, _)| *j == idx) {
                        Some(entry) => entry.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                for entry in &mut row {
                    entry.1 /= total;
                }
                row
            })
            .collect();
        Self { in_len, taps }
    }

    /// Downsampling filter, optionally anti-aliased.
    pub fn downsample(in_len: usize, spec: &ResampleSpec) -> Self {
        let f = spec.factor as f64;
        let out_len = spec.output_len(in_len);
        let stretch = if spec.antialias { f } else { 1.0 };
        Self::from_kernel(in_len, out_len, |o| {
            let center = (o as f64 + 0.5) * f - 0.5;
            let reach = 2.0 * stretch;
            (
                (center),
                (center - reach).floor() as i64,
                (center + reach).ceil() as i64,
                stretch,
            )
        })
    }

    pub fn upsample(in_len: usize, factor: u32) -> Self {
        let f = factor as f64;
        Self::from_kernel(in_len, in_len * factor as usize, |o| {
            let center = (o as f64 + 0.5) / f - 0.5;
            let base = center.floor() as i64;
            (center, base - 1, base + 2, 1.0)
        })
    }

    /// Normalized Gaussian window of `2 * radius + 1` taps, clamp-to-edge.
    pub fn gaussian_window(len: usize, radius: usize, sigma: f64) -> Self {
        let weights: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let d = k as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let taps = (0..len)
            .map(|o| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
                for (k, w) in weights.iter().enumerate() {
                    let i = (o as i64 + k as i64 - radius as i64).clamp(0, len as i64 - 1) as usize;
                    match row.iter_mut().find(|(j, _)| *j == i) {
                        Some(entry) => entry.1 += w / total,
                        None => row.push((i, w / total)),
                    }
                }
                row
            })
            .collect();
        Self { in_len: len, taps }
    }

    pub fn weight_sums(&self) -> Vec<f64> {
        self.taps.iter().map(|row| row.iter().map(|(_, w)| w).sum()).collect()
    }

    /// Transposed map, `in_len` and `out_len` swapped.
    pub fn transpose(&self) -> Self {
        let mut taps = vec![Vec::new(); self.in_len];
        for (o, row) in self.taps.iter().enumerate() {
            for &(i, w) in row {
                taps[i].push((o, w));
            }
        }
        Self {
            in_len: self.out_len(),
            taps,
        }
    }
}

/// A horizontal and a vertical [`AxisFilter`] applied to 3-channel images.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableFilter {
    pub x: AxisFilter,
    pub y: AxisFilter,
}

impl SeparableFilter {
    pub fn apply(&self, image: &ImageBuffer) -> ImageBuffer {
        assert_eq!(image.width, self.x.in_len);
        assert_eq!(image.height, self.y.in_len);
        let ow = self.x.out_len();
        let oh = self.y.out_len();
        let h = image.height;

        let mut tmp = vec![0.0; ow * h * 3];
        for y in 0..h {
            let src = &image.data[y * image.width * 3..(y + 1) * image.width * 3];
            let dst = &mut tmp[y * ow * 3..(y + 1) * ow * 3];
            for (o, row) in self.x.taps.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(i, w) in row {
                    acc[0] += w * src[i * 3];
                    acc[1] += w * src[i * 3 + 1];
                    acc[2] += w * src[i * 3 + 2];
                }
                dst[o * 3..o * 3 + 3].copy_from_slice(&acc);
            }
        }

        let mut out = vec![0.0; ow * oh * 3];
        for (o, row) in self.y.taps.iter().enumerate() {
            let dst = &mut out[o * ow * 3..(o + 1) * ow * 3];
            for &(i, w) in row {
                let src = &tmp[i * ow * 3..(i + 1) * ow * 3];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        ImageBuffer {
            width: ow,
            height: oh,
            data: out,
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            x: self.x.transpose(),
            y: self.y.transpose(),
        }
    }
}

fn downsample_filter(width: usize, height: usize, spec: &ResampleSpec) -> SeparableFilter {
    SeparableFilter {
        x: AxisFilter::downsample(width, spec),
        y: AxisFilter::downsample(height, spec),
    }
}

/// Bicubic downsampling by `spec.factor`; output is `round(input / factor)`.
pub fn downsample(image: &ImageBuffer, spec: &ResampleSpec) -> Result<ImageBuffer> {
    spec.check()?;
    if spec.factor == 1 {
        return Ok(image.clone());
    }
    Ok(downsample_filter(image.width, image.height, spec).apply(image))
}

/// Adjoint of [`downsample`] for an input of `width` x `height`.
pub fn downsample_adjoint(grad: &ImageBuffer, spec: &ResampleSpec, width: usize, height: usize) -> Result<ImageBuffer> {
    spec.check()?;
    if grad.width != spec.output_len(width) || grad.height != spec.output_len(height) {
        return Err(Error::Dimension(format!(
            "downsample adjoint: gradient is {}x{}, expected {}x{}",
            grad.width,
            grad.height,
            spec.output_len(width),
            spec.output_len(height)
        )));
    }
    if spec.factor == 1 {
        return Ok(grad.clone());
    }
    Ok(downsample_filter(width, height, spec).transpose().apply(grad))
}

/// Plain bicubic interpolation to `factor` times the input size.
pub fn upsample_bicubic(image: &ImageBuffer, factor: u32) -> Result<ImageBuffer> {
    if factor < 1 {
        return Err(Error::Argument(format!("upsample factor must be >= 1, got {factor}")));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let filter = SeparableFilter {
        x: AxisFilter::upsample(image.width, factor),
        y: AxisFilter::upsample(image.height, factor),
    };
    Ok(filter.apply(image))
}
