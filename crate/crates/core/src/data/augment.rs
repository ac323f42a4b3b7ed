use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Training-time photometric and geometric augmentation.
///
/// Operates on `[3, H, W]` RGB in `[0, 1]` (before normalization). Each
/// transform fires independently with its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_rotate: f64,
    pub max_rotation_deg: f64,
    pub p_cutout: f64,
    pub cutout_min: usize,
    pub cutout_max: usize,
    pub p_channel_shift: f64,
    /// In `[0, 1]` intensity units.
    pub max_channel_shift: f64,
    pub p_jitter: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_rotate: 0.5,
            max_rotation_deg: 15.0,
            p_cutout: 0.5,
            cutout_min: 32,
            cutout_max: 64,
            p_channel_shift: 0.5,
            max_channel_shift: 20.0 / 255.0,
            p_jitter: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_flip: 0.0,
            p_rotate: 0.0,
            p_cutout: 0.0,
            p_channel_shift: 0.0,
            p_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_flip,
            self.p_rotate,
            self.p_cutout,
            self.p_channel_shift,
            self.p_jitter,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid("augmentation probabilities must lie in [0, 1]");
        }
        let mags = [
            self.max_rotation_deg,
            self.max_channel_shift,
            self.brightness,
            self.contrast,
            self.saturation,
        ];
        if mags.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return invalid("augmentation magnitudes must be finite and non-negative");
        }
        if self.cutout_min == 0 || self.cutout_min > self.cutout_max {
            return invalid("cutout sizes need 0 < min <= max");
        }
        Ok(())
    }
}

/// Mirrors columns.
pub fn hflip(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(k, i, j)| x[[k, i, w - 1 - j]])
}

/// Rotation about the centre with bilinear sampling and replicated borders.
fn rotate(x: &Array3<f32>, degrees: f64) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::<f32>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).clamp(0.0, (h - 1) as f64);
            let sx = (sin * dy + cos * dx + cx).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for k in 0..c {
                let top = x[[k, y0, x0]] * (1.0 - fx) + x[[k, y0, x1]] * fx;
                let bottom = x[[k, y1, x0]] * (1.0 - fx) + x[[k, y1, x1]] * fx;
                out[[k, i, j]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn luma(x: &Array3<f32>, i: usize, j: usize) -> f32 {
    0.299 * x[[0, i, j]] + 0.587 * x[[1, i, j]] + 0.114 * x[[2, i, j]]
}

/// Applies the configured transforms; the same seed always yields the same output.
///
/// Every random draw is made whether or not its transform fires, so the
/// stream consumed per image is fixed.
pub fn augment(x: &Array3<f32>, cfg: &AugmentConfig, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = x.dim();
    let fire = |p: f64, rng: &mut ChaCha8Rng| rng.random::<f64>() < p;

    let flip = fire(cfg.p_flip, &mut rng);
    let do_rotate = fire(cfg.p_rotate, &mut rng);
    let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg;
    let do_cutout = fire(cfg.p_cutout, &mut rng);
    let side = rng.random_range(cfg.cutout_min..=cfg.cutout_max.max(cfg.cutout_min));
    let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
    let do_shift = fire(cfg.p_channel_shift, &mut rng);
    let shifts: [f64; 3] =
        std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * cfg.max_channel_shift);
    let do_jitter = fire(cfg.p_jitter, &mut rng);
    let b = 1.0 + rng.random_range(-1.0..=1.0) * cfg.brightness;
    let ct = 1.0 + rng.random_range(-1.0..=1.0) * cfg.contrast;
    let sat = 1.0 + rng.random_range(-1.0..=1.0) * cfg.saturation;

    let mut y = if flip { hflip(x) } else { x.clone() };
    if do_rotate && angle != 0.0 {
        y = rotate(&y, angle);
    }
    if do_cutout {
        let half = side / 2;
        let (y0, x0) = (cy.saturating_sub(half), cx.saturating_sub(half));
        let (y1, x1) = ((y0 + side).min(h), (x0 + side).min(w));
        y.slice_mut(ndarray::s![.., y0..y1, x0..x1]).fill(0.0);
    }
    if do_shift {
        for (k, mut plane) in y.outer_iter_mut().enumerate() {
            let s = shifts[k % 3] as f32;
            plane.mapv_inplace(|v| v + s);
        }
    }
    if do_jitter && c == 3 {
        y.mapv_inplace(|v| v * b as f32);
        let mean_gray =
            (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| luma(&y, i, j) as f64).sum::<f64>()
                / (h * w) as f64;
        y.mapv_inplace(|v| (v - mean_gray as f32) * ct as f32 + mean_gray as f32);
        for i in 0..h {
            for j in 0..w {
                let g = luma(&y, i, j);
                for k in 0..3 {
                    y[[k, i, j]] = g + (y[[k, i, j]] - g) * sat as f32;
                }
            }
        }
    }
    if do_shift || do_jitter {
        y.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    y
}
