use ndarray::{Array2, Array4, Axis};

use crate::tensor::Scalar;

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / T::of((h * w) as f64)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let scale = T::one() / T::of((h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| dy[[i, j]] * scale)
}

/// Max pooling with implicit negative-infinity padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Flat argmax index (within the input plane) of every output cell.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let mut y = Array4::<T>::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for b in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), ch);
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for ki in 0..self.kernel {
                            let ih = (i * self.stride + ki) as isize - self.padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let iw = (j * self.stride + kj) as isize - self.padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let v = plane[[ih as usize, iw as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = ih as usize * w + iw as usize;
                                }
                            }
                        }
                        y[[b, ch, i, j]] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                input_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &MaxPoolCache, dy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = cache.input_dim;
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let plane_out = dy.dim().2 * dy.dim().3;
        for (k, (&g, &idx)) in dy.iter().zip(cache.argmax.iter()).enumerate() {
            let bc = k / plane_out;
            let (b, ch) = (bc / c, bc % c);
            dx[[b, ch, idx / w, idx % w]] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dx = pool.backward(&cache, &Array4::<f64>::ones((1, 1, 2, 2)));
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn avg_pool_backward_is_adjoint() {
        let x = Array4::from_shape_fn((2, 3, 2, 5), |(a, b, c, d)| (a + 2 * b + 3 * c + d) as f64);
        let g = Array2::from_shape_fn((2, 3), |(a, b)| (a * 3 + b) as f64 - 2.0);
        let lhs = (global_avg_pool(&x) * &g).sum();
        let rhs = (global_avg_pool_backward(&g, 2, 5) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
