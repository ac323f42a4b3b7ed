use std::path::Path;

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::manifest::{CropBox, SampleManifest, SampleRecord};
use crate::error::{invalid, Error, Result};
use crate::nn::linear_taps;

/// Per-channel `(x - mean) / std`, applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet channel statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || !self.mean.iter().all(|m| m.is_finite()) {
            return invalid(format!("normalization std must be positive and finite: {self:?}"));
        }
        Ok(())
    }
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    Ok(image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8())
}

/// Crops (or takes the full frame) and bilinearly resizes to `size x size`.
/// Returns `[3, size, size]` RGB in `[0, 1]`.
pub fn crop_and_resize(img: &RgbImage, crop: Option<CropBox>, size: usize) -> Result<Array3<f32>> {
    let (iw, ih) = img.dimensions();
    let c = crop.unwrap_or(CropBox {
        x: 0,
        y: 0,
        w: iw,
        h: ih,
    });
    if !c.fits(iw, ih) {
        return invalid(format!("crop box {c:?} does not fit a {iw}x{ih} image"));
    }
    if size == 0 {
        return invalid("output size must be positive");
    }
    let (cw, ch) = (c.w as usize, c.h as usize);
    let raw = img.as_raw();
    let stride = iw as usize * 3;
    let pixel = |y: usize, x: usize, k: usize| -> f32 {
        f32::from(raw[(c.y as usize + y) * stride + (c.x as usize + x) * 3 + k]) / 255.0
    };
    let mut out = Array3::<f32>::zeros((3, size, size));
    if cw == size && ch == size {
        for k in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    out[[k, y, x]] = pixel(y, x, k);
                }
            }
        }
        return Ok(out);
    }
    let rows = linear_taps(ch, size);
    let cols = linear_taps(cw, size);
    // Horizontal pass into [ch, size] per channel, then vertical.
    let mut tmp = vec![0f32; 3 * ch * size];
    for k in 0..3 {
        for y in 0..ch {
            for (x, t) in cols.iter().enumerate() {
                tmp[(k * ch + y) * size + x] =
                    t.w0 as f32 * pixel(y, t.i0, k) + t.w1 as f32 * pixel(y, t.i1, k);
            }
        }
    }
    for k in 0..3 {
        for (y, t) in rows.iter().enumerate() {
            let r0 = &tmp[(k * ch + t.i0) * size..][..size];
            let r1 = &tmp[(k * ch + t.i1) * size..][..size];
            for x in 0..size {
                out[[k, y, x]] = t.w0 as f32 * r0[x] + t.w1 as f32 * r1[x];
            }
        }
    }
    Ok(out)
}

pub fn normalize_in_place(x: &mut Array3<f32>, norm: &Normalization) {
    for (k, mut plane) in x.outer_iter_mut().enumerate() {
        let (m, s) = (norm.mean[k % 3] as f32, norm.std[k % 3] as f32);
        plane.mapv_inplace(|v| (v - m) / s);
    }
}

/// Reads, crops, resizes and normalizes one frame.
pub fn load_and_crop(
    manifest: &SampleManifest,
    record: &SampleRecord,
    size: usize,
    norm: &Normalization,
) -> Result<Array3<f32>> {
    let img = load_rgb(manifest.resolve(record))?;
    let mut x = crop_and_resize(&img, record.crop, size)?;
    normalize_in_place(&mut x, norm);
    Ok(x)
}
