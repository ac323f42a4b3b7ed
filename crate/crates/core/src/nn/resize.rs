use ndarray::{Array4, ArrayView3, ArrayViewMut3, Axis, Zip};

use crate::tensor::Scalar;

/// One output coordinate of 1-D linear interpolation: two source indices and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-centred linear interpolation taps (`align_corners = false`).
pub fn linear_taps(input: usize, output: usize) -> Vec<LinearTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            LinearTap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

fn resize_plane<T: Scalar>(
    src: ArrayView3<'_, T>,
    mut dst: ArrayViewMut3<'_, T>,
    rows: &[LinearTap],
    cols: &[LinearTap],
) {
    for (c, mut out) in dst.outer_iter_mut().enumerate() {
        let plane = src.index_axis(Axis(0), c);
        for (i, rt) in rows.iter().enumerate() {
            for (j, ct) in cols.iter().enumerate() {
                let top =
                    plane[[rt.i0, ct.i0]] * T::of(ct.w0) + plane[[rt.i0, ct.i1]] * T::of(ct.w1);
                let bot =
                    plane[[rt.i1, ct.i0]] * T::of(ct.w0) + plane[[rt.i1, ct.i1]] * T::of(ct.w1);
                out[[i, j]] = top * T::of(rt.w0) + bot * T::of(rt.w1);
            }
        }
    }
}

/// Bilinear resize of an NCHW tensor; the identity when sizes already match.
pub fn bilinear_resize<T: Scalar>(x: &Array4<T>, oh: usize, ow: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let rows = linear_taps(h, oh);
    let cols = linear_taps(w, ow);
    let mut y = Array4::<T>::zeros((n, c, oh, ow));
    Zip::from(y.outer_iter_mut())
        .and(x.outer_iter())
        .par_for_each(|dst, src| resize_plane(src, dst, &rows, &cols));
    y
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Scalar>(dy: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, oh, ow) = dy.dim();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let rows = linear_taps(h, oh);
    let cols = linear_taps(w, ow);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    Zip::from(dx.outer_iter_mut())
        .and(dy.outer_iter())
        .par_for_each(|mut dst, src| {
            for ch in 0..c {
                for (i, rt) in rows.iter().enumerate() {
                    for (j, ct) in cols.iter().enumerate() {
                        let g = src[[ch, i, j]];
                        dst[[ch, rt.i0, ct.i0]] += g * T::of(rt.w0 * ct.w0);
                        dst[[ch, rt.i0, ct.i1]] += g * T::of(rt.w0 * ct.w1);
                        dst[[ch, rt.i1, ct.i0]] += g * T::of(rt.w1 * ct.w0);
                        dst[[ch, rt.i1, ct.i1]] += g * T::of(rt.w1 * ct.w1);
                    }
                }
            }
        });
    dx
}
