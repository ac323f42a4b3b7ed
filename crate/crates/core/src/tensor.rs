//! Element type abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + rustfft::FftNum
    + 'static
{
    /// Name stored in checkpoint headers.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Logistic sigmoid, stable for large magnitudes.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// True when every element is finite.
pub fn all_finite<'a, T: Scalar>(values: impl IntoIterator<Item = &'a T>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// `c = alpha * a * b + beta * c`.
///
/// Uses ndarray's pure-Rust kernels, single-threaded: callers parallelise
/// over samples with rayon, so results do not depend on the machine's core
/// count or on the system BLAS build.
pub fn gemm<T: Scalar, A, B, C>(
    alpha: T,
    a: &ndarray::ArrayBase<A, ndarray::Ix2>,
    b: &ndarray::ArrayBase<B, ndarray::Ix2>,
    beta: T,
    c: &mut ndarray::ArrayBase<C, ndarray::Ix2>,
) where
    A: ndarray::Data<Elem = T>,
    B: ndarray::Data<Elem = T>,
    C: ndarray::DataMut<Elem = T>,
{
    ndarray::linalg::general_mat_mul(alpha, a, b, beta, c);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn check<T: Scalar>(m: usize, k: usize, n: usize, tol: f64) {
        let a = Array2::from_shape_fn((m, k), |(i, j)| T::of(((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5));
        let b = Array2::from_shape_fn((k, n), |(i, j)| T::of(((i * 5 + j * 13) % 17) as f64 / 17.0 - 0.5));
        let mut c = Array2::<T>::zeros((m, n));
        gemm(T::one(), &a, &b, T::zero(), &mut c);
        for i in 0..m {
            for j in (0..n).step_by(37) {
                let s: f64 = (0..k).map(|p| a[[i, p]].f64() * b[[p, j]].f64()).sum();
                assert!((c[[i, j]].f64() - s).abs() < tol, "{m}x{k}x{n} at ({i}, {j})");
            }
        }
    }

    #[test]
    fn gemm_matches_triple_loop_on_wide_products() {
        // Conv-shaped products: few rows, many columns.
        for (m, k, n) in [(8, 27, 100), (8, 27, 12544), (16, 144, 3136), (128, 1152, 49)] {
            check::<f64>(m, k, n, 1e-12);
            check::<f32>(m, k, n, 1e-4);
        }
    }
}
