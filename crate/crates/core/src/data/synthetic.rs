//! Procedural bona fide / attack corpus with controlled spectral signatures.
//!
//! Bona fide frames are smooth face-like renderings plus a per-video skin
//! texture whose energy lives in the high DCT band, plus weak sensor noise.
//! Attacks are rendered the same way and then passed through a spectral
//! transform:
//!
//! - `lowpass_print` scales every coefficient at depth >= 1/8 by
//!   [`PRINT_HIGH_GAIN`] (energy x0.09) and slightly washes out colour;
//! - `moire_replay` scales the same coefficients by [`REPLAY_HIGH_GAIN`] and
//!   adds two RGB-phased gratings, one in the high band and one above 7/8.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::manifest::{Label, SampleManifest, SampleRecord, Split, NO_PAI};
use crate::error::{invalid, Error, Result};
use crate::freq::{band_map, Band, BandGeometry, Dct2};

/// Amplitude gain of print attacks on coefficients at depth >= 1/8.
pub const PRINT_HIGH_GAIN: f64 = 0.3;
/// Amplitude gain of replay attacks on coefficients at depth >= 1/8.
pub const REPLAY_HIGH_GAIN: f64 = 0.6;

const SENSOR_NOISE: f64 = 0.006;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    LowpassPrint,
    MoireReplay,
}

impl AttackMode {
    pub fn pai(self) -> &'static str {
        match self {
            AttackMode::LowpassPrint => "print",
            AttackMode::MoireReplay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dataset_id: String,
    pub n_videos_per_class: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    /// Attack videos cycle through these modes in order.
    pub attack_modes: Vec<AttackMode>,
    pub seed: u64,
    /// Train / dev / test fractions of each class's videos.
    pub split_fractions: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic".into(),
            n_videos_per_class: 200,
            frames_per_video: 10,
            image_size: 224,
            attack_modes: vec![AttackMode::LowpassPrint, AttackMode::MoireReplay],
            seed: 0,
            split_fractions: [0.5, 0.2, 0.3],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos_per_class == 0 || self.frames_per_video == 0 {
            return invalid("synthetic corpus needs at least one video per class and one frame per video");
        }
        if self.image_size < 16 {
            return invalid(format!("synthetic image size must be >= 16, got {}", self.image_size));
        }
        if self.attack_modes.is_empty() {
            return invalid("at least one attack mode is required");
        }
        if self.dataset_id.is_empty() || self.dataset_id.contains(['/', '\\', ',']) {
            return invalid(format!("dataset id {:?} is not a plain name", self.dataset_id));
        }
        let f = self.split_fractions;
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid(format!("split fractions {f:?} must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Number of videos per split for one class: train and dev are rounded,
    /// test takes the remainder.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.n_videos_per_class;
        let train = ((n as f64) * self.split_fractions[0]).round() as usize;
        let dev = (((n as f64) * self.split_fractions[1]).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        [train, dev, n - train - dev]
    }
}

/// Per-video appearance parameters.
#[derive(Debug, Clone)]
struct Style {
    background: [f64; 3],
    bg_gradient: [f64; 2],
    skin: [f64; 3],
    center: [f64; 2],
    radii: [f64; 2],
    light: [f64; 3],
    texture_std: f64,
    motion_phase: f64,
}

impl Style {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.55..0.9);
        let light = {
            let (a, b) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let z: f64 = 1.0;
            let n = (a * a + b * b + z * z).sqrt();
            [a / n, b / n, z / n]
        };
        Self {
            background: std::array::from_fn(|_| rng.random_range(0.15..0.75)),
            bg_gradient: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            skin: [
                tone,
                tone * rng.random_range(0.68..0.85),
                tone * rng.random_range(0.5..0.72),
            ],
            center: [rng.random_range(0.46..0.54), rng.random_range(0.47..0.55)],
            radii: [rng.random_range(0.26..0.33), rng.random_range(0.34..0.41)],
            light,
            texture_std: rng.random_range(0.028..0.042),
            motion_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

/// Renders frames and applies attack transforms at one image size.
#[derive(Debug)]
pub struct Generator {
    size: usize,
    dct: Dct2<f64>,
    bands: Vec<Band>,
}

fn blob(u: f64, v: f64, cu: f64, cv: f64, su: f64, sv: f64) -> f64 {
    (-((u - cu) / su).powi(2) - ((v - cv) / sv).powi(2)).exp()
}

impl Generator {
    pub fn new(size: usize) -> Result<Self> {
        if size < 16 {
            return invalid(format!("synthetic image size must be >= 16, got {size}"));
        }
        Ok(Self {
            size,
            dct: Dct2::new(size, size),
            bands: band_map(size, size, BandGeometry::AntiDiagonal)?,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Zero-mean luminance texture with unit-variance white spectrum restricted
    /// to the high band, scaled to spatial standard deviation `std`.
    fn texture(&self, rng: &mut ChaCha8Rng, std: f64) -> Array2<f64> {
        let s = self.size;
        let mut coeffs = Array2::<f64>::zeros((s, s));
        let mut count = 0usize;
        for (i, band) in self.bands.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            if *band == Band::High {
                coeffs[[i / s, i % s]] = z;
                count += 1;
            }
        }
        // Orthonormal transform: spatial variance = coefficient energy / pixels.
        let scale = std * s as f64 / (count.max(1) as f64).sqrt();
        coeffs.mapv_inplace(|c| c * scale);
        self.dct.inverse(coeffs.view())
    }

    /// One bona fide frame `[3, S, S]` in `[0, 1]`.
    pub fn bona_fide_frame(&self, video_seed: u64, frame: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
        let style = Style::draw(&mut rng);
        let texture = self.texture(&mut rng, style.texture_std);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(video_seed, 1, frame as u64));
        let s = self.size;
        let t = frame as f64 * 0.7 + style.motion_phase;
        let (cu, cv) = (style.center[0] + 0.012 * t.sin(), style.center[1] + 0.008 * (1.3 * t).cos());
        let [ru, rv] = style.radii;
        let mut out = Array3::<f64>::zeros((3, s, s));
        for i in 0..s {
            for j in 0..s {
                let (u, v) = ((j as f64 + 0.5) / s as f64, (i as f64 + 0.5) / s as f64);
                let (du, dv) = ((u - cu) / ru, (v - cv) / rv);
                let rho2 = du * du + dv * dv;
                let mask = 1.0 / (1.0 + ((rho2.sqrt() - 1.0) / 0.04).exp());
                let nz = (1.0 - rho2).max(0.0).sqrt();
                let lambert = style.light[0] * du + style.light[1] * dv + style.light[2] * nz;
                let shade = (0.6 + 0.4 * lambert).clamp(0.55, 1.0);
                let eyes = blob(u, v, cu - 0.3 * ru, cv - 0.2 * rv, 0.035, 0.02)
                    + blob(u, v, cu + 0.3 * ru, cv - 0.2 * rv, 0.035, 0.02);
                let mouth = blob(u, v, cu, cv + 0.45 * rv, 0.07, 0.018);
                for k in 0..3 {
                    let bg = style.background[k]
                        + style.bg_gradient[0] * (u - 0.5)
                        + style.bg_gradient[1] * (v - 0.5);
                    let mut face = style.skin[k] * shade * (1.0 - 0.65 * eyes);
                    face *= 1.0 - mouth * if k == 0 { 0.2 } else { 0.5 };
                    let tex = texture[[i, j]] * [1.0, 0.95, 0.9][k];
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    out[[k, i, j]] =
                        (bg * (1.0 - mask) + face * mask + tex + SENSOR_NOISE * n).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    /// Scales every coefficient outside the low and mid bands by `gain`, per channel.
    fn attenuate_high(&self, img: &Array3<f64>, gain: f64) -> Array3<f64> {
        let s = self.size;
        let mut out = Array3::<f64>::zeros(img.raw_dim());
        for (src, mut dst) in img.outer_iter().zip(out.outer_iter_mut()) {
            let mut c = self.dct.forward(src);
            for (i, band) in self.bands.iter().enumerate() {
                if matches!(band, Band::High | Band::Residual) {
                    c[[i / s, i % s]] *= gain;
                }
            }
            dst.assign(&self.dct.inverse(c.view()));
        }
        out
    }

    /// Derives an attack frame from its bona fide source.
    pub fn apply_attack(
        &self,
        mode: AttackMode,
        source: &Array3<f64>,
        video_seed: u64,
        frame: usize,
    ) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(video_seed, 2, 0));
        let s = self.size;
        match mode {
            AttackMode::LowpassPrint => {
                let mut out = self.attenuate_high(source, PRINT_HIGH_GAIN);
                let wash = rng.random_range(0.1..0.2);
                let contrast = rng.random_range(0.88..0.96);
                for i in 0..s {
                    for j in 0..s {
                        let g = (out[[0, i, j]] + out[[1, i, j]] + out[[2, i, j]]) / 3.0;
                        for k in 0..3 {
                            let v = out[[k, i, j]];
                            let v = g + (v - g) * (1.0 - wash);
                            out[[k, i, j]] = ((v - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
                        }
                    }
                }
                out
            }
            AttackMode::MoireReplay => {
                let mut out = self.attenuate_high(source, REPLAY_HIGH_GAIN);
                let gratings = [
                    (
                        rng.random_range(0.25..0.33),
                        rng.random_range(0.22..0.3),
                        rng.random_range(0.012..0.02),
                    ),
                    (
                        rng.random_range(0.455..0.49),
                        rng.random_range(0.455..0.49),
                        rng.random_range(0.025..0.04),
                    ),
                ];
                let phase = rng.random_range(0.0..std::f64::consts::TAU) + 0.4 * frame as f64;
                let lift = rng.random_range(0.02..0.06);
                let tau = std::f64::consts::TAU;
                for k in 0..3 {
                    let sub = phase + k as f64 * tau / 3.0;
                    for i in 0..s {
                        for j in 0..s {
                            let mut p = 0.0;
                            for &(fx, fy, a) in &gratings {
                                p += a * (tau * (fx * j as f64 + fy * i as f64) + sub).cos();
                            }
                            out[[k, i, j]] = (out[[k, i, j]] + p + lift).clamp(0.0, 1.0);
                        }
                    }
                }
                out
            }
        }
    }

    /// DCT energy per band summed over channels: `[low without DC, mid, high, residual]`.
    pub fn band_energies(&self, img: &Array3<f64>) -> [f64; 4] {
        let s = self.size;
        let mut e = [0.0; 4];
        for plane in img.outer_iter() {
            let c = self.dct.forward(plane);
            for (i, band) in self.bands.iter().enumerate() {
                if i == 0 {
                    continue;
                }
                let k = match band {
                    Band::Low => 0,
                    Band::Mid => 1,
                    Band::High => 2,
                    Band::Residual => 3,
                };
                e[k] += c[[i / s, i % s]].powi(2);
            }
        }
        e
    }
}

/// Learning-free bona fide score from band energies (higher = more bona fide):
/// high-band share of the AC energy, penalised by residual-to-high energy.
pub fn band_ratio_score(e: [f64; 4]) -> f64 {
    let tiny = 1e-12;
    let ac = e.iter().sum::<f64>() + tiny;
    let high = e[2] + tiny;
    (high / ac).ln() - (e[3] / high + tiny).ln()
}

pub fn to_rgb8(img: &Array3<f64>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|k| {
            (img[[k, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn from_rgb8(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for k in 0..3 {
            out[[k, y as usize, x as usize]] = f64::from(p[k]) / 255.0;
        }
    }
    out
}

fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Fast, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::image(path, e))
}

/// Identity of one generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPlan {
    pub video_id: String,
    pub label: Label,
    pub mode: Option<AttackMode>,
    pub split: Split,
    pub seed: u64,
}

/// Video ids, labels, modes, splits and seeds in manifest order.
pub fn plan_videos(spec: &SyntheticSpec) -> Result<Vec<VideoPlan>> {
    spec.validate()?;
    let counts = spec.split_counts();
    let mut plans = Vec::new();
    for (class, label) in [Label::BonaFide, Label::Attack].into_iter().enumerate() {
        let mut order: Vec<usize> = (0..spec.n_videos_per_class).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 10 + class as u64, 0)));
        let mut split_of = vec![Split::Train; spec.n_videos_per_class];
        for (rank, &v) in order.iter().enumerate() {
            split_of[v] = if rank < counts[0] {
                Split::Train
            } else if rank < counts[0] + counts[1] {
                Split::Dev
            } else {
                Split::Test
            };
        }
        for (v, &split) in split_of.iter().enumerate() {
            let mode = (label == Label::Attack).then(|| spec.attack_modes[v % spec.attack_modes.len()]);
            let tag = mode.map_or("bf", AttackMode::pai);
            plans.push(VideoPlan {
                video_id: format!("{}-{tag}-{v:04}", spec.dataset_id),
                label,
                mode,
                split,
                seed: derive_seed(spec.seed, class as u64, v as u64),
            });
        }
    }
    Ok(plans)
}

/// Writes frames under `out_dir/frames/<video_id>/` and `out_dir/manifest.csv`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SampleManifest> {
    let out_dir = out_dir.as_ref();
    let plans = plan_videos(spec)?;
    let gen = Generator::new(spec.image_size)?;
    fs::create_dir_all(out_dir.join("frames")).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|v| (0..spec.frames_per_video).map(move |f| (v, f)))
        .collect();
    for plan in &plans {
        let dir = out_dir.join("frames").join(&plan.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let records: Vec<SampleRecord> = jobs
        .par_iter()
        .map(|&(v, f)| -> Result<SampleRecord> {
            let plan = &plans[v];
            let source = gen.bona_fide_frame(plan.seed, f);
            let img = match plan.mode {
                None => source,
                Some(mode) => gen.apply_attack(mode, &source, plan.seed, f),
            };
            let rel = PathBuf::from("frames")
                .join(&plan.video_id)
                .join(format!("{f:03}.png"));
            write_png(&out_dir.join(&rel), &to_rgb8(&img))?;
            Ok(SampleRecord {
                dataset_id: spec.dataset_id.clone(),
                video_id: plan.video_id.clone(),
                frame_path: rel,
                label: plan.label,
                pai: plan.mode.map_or(NO_PAI, AttackMode::pai).to_string(),
                split: plan.split,
                crop: None,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = SampleManifest::new(records, out_dir);
    manifest.write(out_dir.join("manifest.csv"))?;
    let spec_path = out_dir.join("synthetic_spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}

/// Mean band-ratio score of a decoded frame set, for reference discriminators.
pub fn frame_scores(gen: &Generator, frames: &[Array3<f64>]) -> Vec<f64> {
    frames
        .iter()
        .map(|f| band_ratio_score(gen.band_energies(f)))
        .collect()
}

/// Stacks `[3, S, S]` frames along a new leading axis.
pub fn stack_frames(frames: &[Array3<f64>]) -> Result<ndarray::Array4<f64>> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Validation(e.to_string()))
}
