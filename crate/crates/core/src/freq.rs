//! Multi-level frequency decomposition.
//!
//! Each input channel is taken to the orthonormal type-II DCT domain,
//! multiplied by one combined filter per band and brought back with the
//! inverse transform. A combined filter is a fixed binary base mask plus a
//! bounded learnable deviation:
//!
//! ```text
//! C_b = idct2( dct2(x) * (base_b + sigma(learnable_b)) ),  sigma(f) = (1 - e^-f) / (1 + e^-f)
//! ```
//!
//! Bands 1..3 (low, mid, high) partition the plane up to normalised
//! anti-diagonal depth 7/8; band 4 covers the whole spectrum. Components are
//! stacked band-major: index `band * C + channel`.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Module, Param};
use crate::tensor::{all_finite, Scalar};

mod dct;

pub use dct::Dct2;

/// Number of bands (low, mid, high, full spectrum).
pub const N_BANDS: usize = 4;

/// Frequency band of a single DCT coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Low,
    Mid,
    High,
    /// Above 7/8 of the spectrum; only the full-spectrum band covers it.
    Residual,
}

impl Band {
    /// Index of the base mask containing this band, if any of masks 1..3 does.
    pub fn base_index(self) -> Option<usize> {
        match self {
            Band::Low => Some(0),
            Band::Mid => Some(1),
            Band::High => Some(2),
            Band::Residual => None,
        }
    }
}

/// How "fraction of the spectrum" is measured on the 2-D DCT plane.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandGeometry {
    /// Normalised anti-diagonal depth `(u + v) / (H + W - 2)`.
    #[default]
    AntiDiagonal,
    /// Fraction of coefficients when visited in anti-diagonal (zig-zag) order.
    AreaFraction,
}

/// Classifies a position `num / den` of the spectrum in exact integer arithmetic.
fn band_from_fraction(num: usize, den: usize) -> Band {
    if 16 * num < den {
        Band::Low
    } else if 8 * num < den {
        Band::Mid
    } else if 8 * num < 7 * den {
        Band::High
    } else {
        Band::Residual
    }
}

/// Band of coefficient `(u, v)` on an `h x w` plane under anti-diagonal depth.
pub fn band_of(u: usize, v: usize, h: usize, w: usize) -> Result<Band> {
    if h == 0 || w == 0 || u >= h || v >= w {
        return invalid(format!("coefficient ({u}, {v}) outside a {h}x{w} plane"));
    }
    let den = h + w - 2;
    if den == 0 {
        return Ok(Band::Low);
    }
    Ok(band_from_fraction(u + v, den))
}

/// Row-major band assignment of a whole plane.
pub fn band_map(h: usize, w: usize, geometry: BandGeometry) -> Result<Vec<Band>> {
    if h == 0 || w == 0 {
        return invalid("band map needs a non-empty plane");
    }
    match geometry {
        BandGeometry::AntiDiagonal => (0..h * w).map(|i| band_of(i / w, i % w, h, w)).collect(),
        BandGeometry::AreaFraction => {
            let mut order: Vec<usize> = (0..h * w).collect();
            order.sort_by_key(|&i| (i / w + i % w, i / w));
            let mut bands = vec![Band::Low; h * w];
            for (rank, &i) in order.iter().enumerate() {
                bands[i] = band_from_fraction(rank, h * w);
            }
            Ok(bands)
        }
    }
}

/// Bounded normalisation of a learnable filter value into (-1, 1).
#[inline]
pub fn sigma_norm<T: Scalar>(f: T) -> T {
    // (1 - e^-f) / (1 + e^-f) == tanh(f / 2), which avoids overflow for large |f|.
    (f * T::of(0.5)).tanh()
}

#[inline]
fn sigma_norm_grad<T: Scalar>(f: T) -> T {
    let s = sigma_norm(f);
    (T::one() - s * s) * T::of(0.5)
}

fn check_grid<T: Scalar>(x: &Array2<T>) -> Result<()> {
    if x.is_empty() {
        return invalid("transform input must be at least 1x1");
    }
    if !all_finite(x.iter()) {
        return invalid("transform input contains non-finite values");
    }
    Ok(())
}

/// Orthonormal type-II 2-D DCT of a single grid.
pub fn dct2<T: Scalar>(x: &Array2<T>) -> Result<Array2<T>> {
    check_grid(x)?;
    let (h, w) = x.dim();
    Ok(Dct2::new(h, w).forward(x.view()))
}

/// Inverse of [`dct2`] (type-III with orthonormal scaling).
pub fn idct2<T: Scalar>(y: &Array2<T>) -> Result<Array2<T>> {
    check_grid(y)?;
    let (h, w) = y.dim();
    Ok(Dct2::new(h, w).inverse(y.view()))
}

/// Initialisation of the learnable masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskInit {
    /// Combined filters start exactly at the base filters.
    #[default]
    Zeros,
    /// Uniform noise in `[-scale, scale]`.
    Uniform { scale: f64 },
}

/// Fixed binary base masks and the learnable masks added to them.
#[derive(Debug, Clone)]
pub struct FilterBank<T: Scalar> {
    /// `[N_BANDS, H, W]`, entries exactly 0 or 1, never trained.
    pub base: Param<T>,
    /// `[N_BANDS, H, W]`, unbounded; the only trainable tensor of the front-end.
    pub learnable: Param<T>,
    pub geometry: BandGeometry,
    dct: Dct2<T>,
}

/// Zero-initialised filter bank with anti-diagonal bands.
///
/// The seed only matters for non-zero [`MaskInit`] variants.
pub fn init_filter_bank<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<FilterBank<T>> {
    FilterBank::new(h, w, BandGeometry::AntiDiagonal, MaskInit::Zeros, seed)
}

impl<T: Scalar> FilterBank<T> {
    pub fn new(
        h: usize,
        w: usize,
        geometry: BandGeometry,
        init: MaskInit,
        seed: u64,
    ) -> Result<Self> {
        if h < 2 || w < 2 {
            return invalid(format!("filter bank needs at least 2x2, got {h}x{w}"));
        }
        let bands = band_map(h, w, geometry)?;
        let mut base = Array3::<T>::zeros((N_BANDS, h, w));
        for (i, band) in bands.iter().enumerate() {
            if let Some(b) = band.base_index() {
                base[[b, i / w, i % w]] = T::one();
            }
            base[[N_BANDS - 1, i / w, i % w]] = T::one();
        }
        let learnable = match init {
            MaskInit::Zeros => vec![T::zero(); N_BANDS * h * w],
            MaskInit::Uniform { scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..N_BANDS * h * w)
                    .map(|_| T::of(rng.random_range(-scale..=scale)))
                    .collect()
            }
        };
        Ok(Self {
            base: Param::buffer(
                "filter_bank.base",
                &[N_BANDS, h, w],
                base.into_raw_vec_and_offset().0,
            ),
            learnable: Param::new("filter_bank.learnable", &[N_BANDS, h, w], learnable),
            geometry,
            dct: Dct2::new(h, w),
        })
    }

    pub fn height(&self) -> usize {
        self.base.value.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.base.value.shape()[2]
    }

    pub fn n_bands(&self) -> usize {
        N_BANDS
    }

    pub fn dct(&self) -> &Dct2<T> {
        &self.dct
    }

    pub fn base_mask(&self, band: usize) -> ArrayView2<'_, T> {
        self.base
            .value
            .index_axis(Axis(0), band)
            .into_dimensionality()
            .expect("2-d mask")
    }

    pub fn learnable_mask(&self, band: usize) -> ArrayView2<'_, T> {
        self.learnable
            .value
            .index_axis(Axis(0), band)
            .into_dimensionality()
            .expect("2-d mask")
    }

    /// `base + sigma(learnable)` for every band, `[N_BANDS, H, W]`.
    pub fn combined(&self) -> Array3<T> {
        let mut out = Array3::<T>::zeros((N_BANDS, self.height(), self.width()));
        Zip::from(&mut out)
            .and(&self.base.value.view().into_dimensionality().expect("3-d"))
            .and(
                &self
                    .learnable
                    .value
                    .view()
                    .into_dimensionality()
                    .expect("3-d"),
            )
            .for_each(|o, &b, &l| *o = b + sigma_norm(l));
        out
    }

    fn check_learnable(&self) -> Result<()> {
        if !all_finite(self.learnable.value.iter()) {
            return invalid("learnable masks contain non-finite values");
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for FilterBank<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.base);
        f(&self.learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.base);
        f(&mut self.learnable);
    }
}

/// Frequency components of one image, `[N_BANDS * C, H, W]`, band-major.
#[derive(Debug, Clone)]
pub struct DecomposedStack<T> {
    pub components: Array3<T>,
    /// `(H, W, C)` of the source image.
    pub source_shape: (usize, usize, usize),
}

impl<T: Scalar> DecomposedStack<T> {
    pub fn component(&self, band: usize, channel: usize) -> ArrayView2<'_, T> {
        let c = self.source_shape.2;
        self.components.index_axis(Axis(0), band * c + channel)
    }
}

/// DCT coefficients of the batch input, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecomposeCache<T> {
    coeffs: Array4<T>,
}

/// Decomposes a single CHW image.
pub fn decompose<T: Scalar>(image: &Array3<T>, bank: &FilterBank<T>) -> Result<DecomposedStack<T>> {
    let (c, h, w) = image.dim();
    let batch = image.view().insert_axis(Axis(0)).to_owned();
    let (stack, _) = decompose_batch(&batch, bank)?;
    Ok(DecomposedStack {
        components: stack.index_axis_move(Axis(0), 0),
        source_shape: (h, w, c),
    })
}

/// Batched decomposition: `[N, C, H, W] -> [N, N_BANDS * C, H, W]`.
pub fn decompose_batch<T: Scalar>(
    x: &Array4<T>,
    bank: &FilterBank<T>,
) -> Result<(Array4<T>, DecomposeCache<T>)> {
    let (n, c, h, w) = x.dim();
    if (h, w) != (bank.height(), bank.width()) {
        return invalid(format!(
            "image is {h}x{w} but the filter bank is {}x{}",
            bank.height(),
            bank.width()
        ));
    }
    if !all_finite(x.iter()) {
        return invalid("image contains non-finite values");
    }
    bank.check_learnable()?;
    let filters = bank.combined();
    let dct = bank.dct();
    let mut coeffs = Array4::<T>::zeros((n, c, h, w));
    let mut out = Array4::<T>::zeros((n, N_BANDS * c, h, w));
    Zip::from(coeffs.outer_iter_mut())
        .and(out.outer_iter_mut())
        .and(x.outer_iter())
        .par_for_each(|mut co, mut o, xs| {
            let mut masked = Array2::<T>::zeros((h, w));
            for ch in 0..c {
                dct.forward_into(xs.index_axis(Axis(0), ch), co.index_axis_mut(Axis(0), ch));
                for b in 0..N_BANDS {
                    Zip::from(&mut masked)
                        .and(co.index_axis(Axis(0), ch))
                        .and(filters.index_axis(Axis(0), b))
                        .for_each(|m, &k, &f| *m = k * f);
                    dct.inverse_into(masked.view(), o.index_axis_mut(Axis(0), b * c + ch));
                }
            }
        });
    Ok((out, DecomposeCache { coeffs }))
}

/// Accumulates learnable-mask gradients and optionally returns the input gradient.
pub fn decompose_backward<T: Scalar>(
    bank: &mut FilterBank<T>,
    cache: &DecomposeCache<T>,
    d_stack: &Array4<T>,
    need_dx: bool,
) -> Option<Array4<T>> {
    let (n, c, h, w) = cache.coeffs.dim();
    let filters = bank.combined();
    let dct = bank.dct().clone();
    let per_sample: Vec<(Array3<T>, Option<Array3<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let coeffs = cache.coeffs.index_axis(Axis(0), i);
            let grads = d_stack.index_axis(Axis(0), i);
            let mut d_filter = Array3::<T>::zeros((N_BANDS, h, w));
            let mut dx = need_dx.then(|| Array3::<T>::zeros((c, h, w)));
            let mut g = Array2::<T>::zeros((h, w));
            let mut d_coeff = Array2::<T>::zeros((h, w));
            for ch in 0..c {
                d_coeff.fill(T::zero());
                for b in 0..N_BANDS {
                    dct.forward_into(grads.index_axis(Axis(0), b * c + ch), g.view_mut());
                    Zip::from(d_filter.index_axis_mut(Axis(0), b))
                        .and(&g)
                        .and(coeffs.index_axis(Axis(0), ch))
                        .for_each(|d, &gv, &k| *d += gv * k);
                    if need_dx {
                        Zip::from(&mut d_coeff)
                            .and(&g)
                            .and(filters.index_axis(Axis(0), b))
                            .for_each(|d, &gv, &f| *d += gv * f);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    dct.inverse_into(d_coeff.view(), dx.index_axis_mut(Axis(0), ch));
                }
            }
            (d_filter, dx)
        })
        .collect();

    let mut dx_out = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
    let mut d_filter = Array3::<T>::zeros((N_BANDS, h, w));
    for (i, (df, dx)) in per_sample.into_iter().enumerate() {
        d_filter += &df;
        if let (Some(out), Some(dx)) = (dx_out.as_mut(), dx) {
            out.slice_mut(s![i, .., .., ..]).assign(&dx);
        }
    }
    let learn = bank.learnable.value.clone();
    Zip::from(&mut bank.learnable.grad)
        .and(&d_filter.into_dyn())
        .and(&learn)
        .for_each(|g, &d, &l| *g += d * sigma_norm_grad(l));
    dx_out
}
