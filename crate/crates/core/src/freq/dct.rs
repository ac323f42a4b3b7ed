//! Orthonormal 2-D DCT-II / DCT-III via complex FFTs.
//!
//! Rows are reordered (even samples ascending, odd samples descending) so a
//! length-N DCT becomes one length-N FFT plus a twiddle. Two real rows share
//! each complex transform.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::Scalar;

/// Length-`n` transform along contiguous rows.
#[derive(Clone)]
struct Dct1<T: Scalar> {
    n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
    /// Forward post-twiddle with the 1/2 unpacking factor and orthonormal scale folded in.
    fwd_re: Vec<T>,
    fwd_im: Vec<T>,
    /// Inverse pre-twiddle coefficients for `X[k]` and `X[n - k]`, including 1/n.
    inv_a: Vec<T>,
    inv_b: Vec<T>,
    inv_p: Vec<T>,
    inv_q: Vec<T>,
}

impl<T: Scalar> Dct1<T> {
    fn new(n: usize, planner: &mut FftPlanner<T>) -> Self {
        let nf = n as f64;
        let scale = |k: usize| if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        let angle = |k: usize| -std::f64::consts::PI * k as f64 / (2.0 * nf);
        let mut t = Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            fwd_re: Vec::with_capacity(n),
            fwd_im: Vec::with_capacity(n),
            inv_a: Vec::with_capacity(n),
            inv_b: Vec::with_capacity(n),
            inv_p: Vec::with_capacity(n),
            inv_q: Vec::with_capacity(n),
        };
        for k in 0..n {
            let (wi, wr) = angle(k).sin_cos();
            t.fwd_re.push(T::of(0.5 * wr * scale(k)));
            t.fwd_im.push(T::of(0.5 * wi * scale(k)));
            let s_k = 1.0 / (scale(k) * nf);
            let s_nk = if k == 0 { 0.0 } else { 1.0 / (scale(n - k) * nf) };
            t.inv_a.push(T::of(wr * s_k));
            t.inv_b.push(T::of(wi * s_k));
            t.inv_p.push(T::of(wr * s_nk));
            t.inv_q.push(T::of(wi * s_nk));
        }
        t
    }

    fn scratch_len(&self) -> usize {
        self.fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len())
    }

    /// In-place forward transform of every row of `data` (`rows * n` values).
    fn forward_rows(&self, data: &mut [T], buf: &mut Vec<Complex<T>>, scratch: &mut [Complex<T>]) {
        let n = self.n;
        let zero = Complex::new(T::zero(), T::zero());
        buf.clear();
        buf.resize(data.len().div_ceil(2 * n) * n, zero);
        for (z, pair) in buf.chunks_exact_mut(n).zip(data.chunks(2 * n)) {
            let (r0, r1) = pair.split_at(n);
            let (head, tail) = z.split_at_mut(n.div_ceil(2));
            for (m, zv) in head.iter_mut().enumerate() {
                zv.re = r0[2 * m];
                zv.im = if r1.is_empty() { T::zero() } else { r1[2 * m] };
            }
            for (m, zv) in tail.iter_mut().rev().enumerate() {
                zv.re = r0[2 * m + 1];
                zv.im = if r1.is_empty() { T::zero() } else { r1[2 * m + 1] };
            }
        }
        self.fwd.process_with_scratch(buf, scratch);
        let two = T::of(2.0);
        for (z, pair) in buf.chunks_exact(n).zip(data.chunks_mut(2 * n)) {
            let (r0, r1) = pair.split_at_mut(n);
            // k = 0 pairs z[0] with itself and has a real twiddle.
            r0[0] = self.fwd_re[0] * two * z[0].re;
            if !r1.is_empty() {
                r1[0] = self.fwd_re[0] * two * z[0].im;
            }
            let (fr, fi) = (&self.fwd_re[1..], &self.fwd_im[1..]);
            let (za, zb) = (&z[1..], &z[1..]);
            if r1.is_empty() {
                for ((((o, a), b), &wr), &wi) in r0[1..].iter_mut().zip(za).zip(zb.iter().rev()).zip(fr).zip(fi) {
                    *o = wr * (a.re + b.re) - wi * (a.im - b.im);
                }
            } else {
                for (((((o0, o1), a), b), &wr), &wi) in r0[1..]
                    .iter_mut()
                    .zip(r1[1..].iter_mut())
                    .zip(za)
                    .zip(zb.iter().rev())
                    .zip(fr)
                    .zip(fi)
                {
                    *o0 = wr * (a.re + b.re) - wi * (a.im - b.im);
                    *o1 = wr * (a.im + b.im) + wi * (a.re - b.re);
                }
            }
        }
    }

    /// In-place inverse transform of every row of `data`.
    fn inverse_rows(&self, data: &mut [T], buf: &mut Vec<Complex<T>>, scratch: &mut [Complex<T>]) {
        let n = self.n;
        let zero = Complex::new(T::zero(), T::zero());
        buf.clear();
        buf.resize(data.len().div_ceil(2 * n) * n, zero);
        let (ia, ib, ip, iq) = (&self.inv_a[1..], &self.inv_b[1..], &self.inv_p[1..], &self.inv_q[1..]);
        for (z, pair) in buf.chunks_exact_mut(n).zip(data.chunks(2 * n)) {
            let (r0, r1) = pair.split_at(n);
            // k = 0 has no mirrored partner.
            let (a0, b0) = (self.inv_a[0], self.inv_b[0]);
            z[0] = Complex::new(a0 * r0[0], -b0 * r0[0]);
            if !r1.is_empty() {
                z[0] = Complex::new(a0 * r0[0] + b0 * r1[0], -b0 * r0[0] + a0 * r1[0]);
            }
            let coeffs = ia.iter().zip(ib).zip(ip.iter().zip(iq));
            if r1.is_empty() {
                for (((zv, &x), &xn), ((&a, &b), (&p, &q))) in
                    z[1..].iter_mut().zip(&r0[1..]).zip(r0[1..].iter().rev()).zip(coeffs)
                {
                    zv.re = a * x - q * xn;
                    zv.im = -(p * xn + b * x);
                }
            } else {
                for (((((zv, &x0), &x0n), &x1), &x1n), ((&a, &b), (&p, &q))) in z[1..]
                    .iter_mut()
                    .zip(&r0[1..])
                    .zip(r0[1..].iter().rev())
                    .zip(&r1[1..])
                    .zip(r1[1..].iter().rev())
                    .zip(coeffs)
                {
                    let (u0_re, u0_im) = (a * x0 - q * x0n, -(p * x0n + b * x0));
                    let (u1_re, u1_im) = (a * x1 - q * x1n, -(p * x1n + b * x1));
                    zv.re = u0_re - u1_im;
                    zv.im = u0_im + u1_re;
                }
            }
        }
        self.inv.process_with_scratch(buf, scratch);
        for (z, pair) in buf.chunks_exact(n).zip(data.chunks_mut(2 * n)) {
            let (r0, r1) = pair.split_at_mut(n);
            let (head, tail) = z.split_at(n.div_ceil(2));
            for (m, zv) in head.iter().enumerate() {
                r0[2 * m] = zv.re;
                if !r1.is_empty() {
                    r1[2 * m] = zv.im;
                }
            }
            for (m, zv) in tail.iter().rev().enumerate() {
                r0[2 * m + 1] = zv.re;
                if !r1.is_empty() {
                    r1[2 * m + 1] = zv.im;
                }
            }
        }
    }
}

/// Precomputed separable 2-D DCT for a fixed plane size.
#[derive(Clone)]
pub struct Dct2<T: Scalar> {
    rows: Dct1<T>,
    cols: Dct1<T>,
}

impl<T: Scalar> fmt::Debug for Dct2<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dct2").field("shape", &self.shape()).finish()
    }
}

impl<T: Scalar> Dct2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cols: Dct1::new(h, &mut planner),
            rows: Dct1::new(w, &mut planner),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.cols.n, self.rows.n)
    }

    fn apply(&self, x: ArrayView2<'_, T>, mut out: ArrayViewMut2<'_, T>, inverse: bool) {
        let (h, w) = self.shape();
        assert_eq!(x.dim(), (h, w), "plane does not match the transform size");
        assert_eq!(out.dim(), (h, w), "output does not match the transform size");
        let zero = Complex::new(T::zero(), T::zero());
        let mut buf = Vec::new();
        let mut scratch = vec![zero; self.rows.scratch_len().max(self.cols.scratch_len())];
        let mut a = match x.as_slice() {
            Some(s) => s.to_vec(),
            None => x.iter().copied().collect(),
        };
        let pass = |plan: &Dct1<T>, data: &mut [T], buf: &mut Vec<Complex<T>>, scratch: &mut [Complex<T>]| {
            if inverse {
                plan.inverse_rows(data, buf, scratch);
            } else {
                plan.forward_rows(data, buf, scratch);
            }
        };
        pass(&self.rows, &mut a, &mut buf, &mut scratch);
        let mut t = vec![T::zero(); h * w];
        transpose(&a, &mut t, h, w);
        pass(&self.cols, &mut t, &mut buf, &mut scratch);
        match out.as_slice_mut() {
            Some(o) => transpose(&t, o, w, h),
            None => {
                transpose(&t, &mut a, w, h);
                out.iter_mut().zip(&a).for_each(|(o, &v)| *o = v);
            }
        }
    }

    /// Forward orthonormal DCT-II of one plane.
    pub fn forward_into(&self, x: ArrayView2<'_, T>, out: ArrayViewMut2<'_, T>) {
        self.apply(x, out, false);
    }

    /// Inverse (orthonormal DCT-III) of one plane.
    pub fn inverse_into(&self, y: ArrayView2<'_, T>, out: ArrayViewMut2<'_, T>) {
        self.apply(y, out, true);
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros(self.shape());
        self.forward_into(x, out.view_mut());
        out
    }

    pub fn inverse(&self, y: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros(self.shape());
        self.inverse_into(y, out.view_mut());
        out
    }
}

/// `dst[j * h + i] = src[i * w + j]`, blocked for cache reuse.
fn transpose<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize) {
    const B: usize = 16;
    for i0 in (0..h).step_by(B) {
        for j0 in (0..w).step_by(B) {
            for i in i0..(i0 + B).min(h) {
                for j in j0..(j0 + B).min(w) {
                    dst[j * h + i] = src[i * w + j];
                }
            }
        }
    }
}
