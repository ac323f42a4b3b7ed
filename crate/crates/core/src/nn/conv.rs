use crate::tensor::gemm;
#[cfg(test)]
use ndarray::Ix4;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::{init_values, Init, Module, Param};
use crate::tensor::Scalar;

/// 2-D convolution with square kernels, lowered to im2col + gemm per sample.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k2 = kernel * kernel;
        let fan_in = in_channels * k2;
        let fan_out = out_channels * k2;
        let w = init_values(init, out_channels * fan_in, fan_in, fan_out, rng);
        let weight = Param::new(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            w,
        );
        let bias = bias.then(|| {
            let b = match init {
                Init::Zeros => vec![T::zero(); out_channels],
                _ => init_values(Init::UniformFanIn, out_channels, fan_in, fan_out, rng),
            };
            Param::new(format!("{name}.bias"), &[out_channels], b)
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((
                self.out_channels,
                self.in_channels * self.kernel * self.kernel,
            ))
            .expect("contiguous weight")
    }

    fn col_len(&self, ho: usize, wo: usize) -> usize {
        if self.is_pointwise() {
            0
        } else {
            self.in_channels * self.kernel * self.kernel * ho * wo
        }
    }

    /// Column matrix of one sample; `buf` keeps its zero padding between calls.
    fn columns<'a>(&self, xs: &'a [T], h: usize, w: usize, ho: usize, wo: usize, buf: &'a mut [T]) -> ArrayView2<'a, T> {
        let c = self.in_channels;
        if self.is_pointwise() {
            return ArrayView2::from_shape((c, h * w), xs).expect("contiguous sample");
        }
        im2col_into(xs, c, h, w, self.kernel, self.stride, self.padding, ho, wo, buf);
        ArrayView2::from_shape((c * self.kernel * self.kernel, ho * wo), &*buf).expect("column buffer")
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.weight.name);
        let (ho, wo) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let xsl = x.as_slice().expect("standard layout");
        let mut y = Array4::<T>::zeros((n, self.out_channels, ho, wo));
        let wm = self.weight_matrix();
        let col_len = self.col_len(ho, wo);
        y.as_slice_mut()
            .expect("fresh array")
            .par_chunks_mut(self.out_channels * ho * wo)
            .zip(xsl.par_chunks(c * h * w))
            .for_each_init(
                || vec![T::zero(); col_len],
                |buf, (ys, xs)| {
                    let cols = self.columns(xs, h, w, ho, wo, buf);
                    let mut ym = ArrayViewMut2::from_shape((self.out_channels, ho * wo), ys).expect("output");
                    gemm(T::one(), &wm, &cols, T::zero(), &mut ym);
                    if let Some(b) = &self.bias {
                        for (mut row, &bv) in ym.outer_iter_mut().zip(b.value.iter()) {
                            row.mapv_inplace(|v| v + bv);
                        }
                    }
                },
            );
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let (_, co, ho, wo) = dy.dim();
        let k = self.kernel;
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let xsl = x.as_slice().expect("standard layout");
        let dysl = dy.as_slice().expect("standard layout");
        let col_len = self.col_len(ho, wo);
        let mut dx_out = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
        let this = &*self;
        let wm = this.weight_matrix();
        let sample = |bufs: &mut (Vec<T>, Vec<T>), i: usize, dx: Option<&mut [T]>| {
            let xs = &xsl[i * c * h * w..(i + 1) * c * h * w];
            let dys = ArrayView2::from_shape((co, ho * wo), &dysl[i * co * ho * wo..(i + 1) * co * ho * wo])
                .expect("contiguous grad");
            let (cols_buf, dcols_buf) = bufs;
            let cols = this.columns(xs, h, w, ho, wo, cols_buf);
            let mut dw = Array2::<T>::zeros((co, c * k * k));
            gemm(T::one(), &dys, &cols.t(), T::zero(), &mut dw);
            let db = dys.sum_axis(Axis(1));
            if let Some(dx) = dx {
                if this.is_pointwise() {
                    let mut dxm = ArrayViewMut2::from_shape((c, h * w), dx).expect("contiguous");
                    gemm(T::one(), &wm.t(), &dys, T::zero(), &mut dxm);
                } else {
                    let mut dcols =
                        ArrayViewMut2::from_shape((c * k * k, ho * wo), &mut dcols_buf[..]).expect("column buffer");
                    gemm(T::one(), &wm.t(), &dys, T::zero(), &mut dcols);
                    col2im_into(dcols_buf, c, h, w, k, this.stride, this.padding, ho, wo, dx);
                }
            }
            (dw, db)
        };
        let init = || (vec![T::zero(); col_len], vec![T::zero(); if need_dx { col_len } else { 0 }]);
        let per_sample: Vec<(Array2<T>, Array1<T>)> = match dx_out.as_mut() {
            Some(dx) => dx
                .as_slice_mut()
                .expect("fresh array")
                .par_chunks_mut(c * h * w)
                .enumerate()
                .map_init(init, |bufs, (i, d)| sample(bufs, i, Some(d)))
                .collect(),
            None => (0..n).into_par_iter().map_init(init, |bufs, i| sample(bufs, i, None)).collect(),
        };

        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((co, c * k * k))
            .expect("contiguous grad");
        for (dw, db) in per_sample {
            gw += &dw;
            if let Some(b) = &mut self.bias {
                b.grad += &db.into_dyn();
            }
        }
        dx_out
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Output columns `[lo, hi)` whose input index `o * stride + k - pad` lies in `0..n`.
fn valid_range(n: usize, k: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Writes the in-bounds entries of the column matrix; padding entries of
/// `cols` are left untouched and must already be zero.
#[allow(clippy::too_many_arguments)]
fn im2col_into<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(h, ki, stride, pad, ho);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(w, kj, stride, pad, wo);
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + ki - pad;
                    let src_row = &plane[ih * w..(ih + 1) * w];
                    let drow = &mut dst[oh * wo + ow_lo..oh * wo + ow_hi];
                    let start = ow_lo * stride + kj - pad;
                    if stride == 1 {
                        drow.copy_from_slice(&src_row[start..start + drow.len()]);
                    } else {
                        for (d, &v) in drow.iter_mut().zip(src_row[start..].iter().step_by(stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of the column unfolding: adds column gradients onto `x` (CHW).
#[allow(clippy::too_many_arguments)]
fn col2im_into<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(h, ki, stride, pad, ho);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(w, kj, stride, pad, wo);
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + ki - pad;
                    let dst_row = &mut plane[ih * w..(ih + 1) * w];
                    let srow = &src[oh * wo + ow_lo..oh * wo + ow_hi];
                    let start = ow_lo * stride + kj - pad;
                    if stride == 1 {
                        for (d, &v) in dst_row[start..start + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row[start..].iter_mut().step_by(stride).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Direct (nested-loop) convolution used as a test oracle.
#[cfg(test)]
pub(crate) fn conv_direct<T: Scalar>(conv: &Conv2d<T>, x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = conv.output_size(h, w);
    let wt = conv
        .weight
        .value
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap();
    let mut y = Array4::<T>::zeros((n, conv.out_channels, ho, wo));
    for b in 0..n {
        for o in 0..conv.out_channels {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = conv.bias.as_ref().map_or(T::zero(), |b| b.value[[o]]);
                    for ch in 0..c {
                        for ki in 0..conv.kernel {
                            for kj in 0..conv.kernel {
                                let ih = (i * conv.stride + ki) as isize - conv.padding as isize;
                                let iw = (j * conv.stride + kj) as isize - conv.padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc +=
                                        wt[[o, ch, ki, kj]] * x[[b, ch, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                    y[[b, o, i, j]] = acc;
                }
            }
        }
    }
    y
}
