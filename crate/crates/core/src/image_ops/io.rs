use std::path::Path;

use image::{DynamicImage, ImageBuffer as RawImage, Rgb};

use super::ImageBuffer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round_ties_even()
}

/// Reads an 8- or 16-bit PNG, scaling samples by the bit-depth maximum.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let load_err = |message: String| Error::Load {
        what: path.display().to_string(),
        message,
    };
    let img = image::open(path).map_err(|e| load_err(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img
            .into_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img
            .into_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => return Err(load_err(format!("unsupported pixel format {:?}", other.color()))),
    };
    ImageBuffer::from_data(width, height, data)
}

/// Writes an RGB PNG; samples are clamped to `[0, 1]` and rounded half to even.
pub fn write_png(path: &Path, image: &ImageBuffer, depth: BitDepth) -> Result<()> {
    let (w, h) = (image.width as u32, image.height as u32);
    let max = depth.max();
    let save_err = |e: image::ImageError| Error::Load {
        what: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = image.data.iter().map(|&v| quantize(v, max) as u8).collect();
            let buf: RawImage<Rgb<u8>, _> = RawImage::from_raw(w, h, raw).expect("buffer size matches");
            buf.save_with_format(path, image::ImageFormat::Png).map_err(save_err)
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = image.data.iter().map(|&v| quantize(v, max) as u16).collect();
            let buf: RawImage<Rgb<u16>, _> = RawImage::from_raw(w, h, raw).expect("buffer size matches");
            buf.save_with_format(path, image::ImageFormat::Png).map_err(save_err)
        }
    }
}
