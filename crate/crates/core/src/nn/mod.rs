//! Minimal layer library with hand-written backward passes.
//!
//! Tensors are `ndarray` arrays in NCHW layout. Every layer exposes a
//! `forward` that returns its output (plus whatever cache the backward pass
//! needs) and a `backward` that accumulates parameter gradients into
//! [`Param::grad`] and optionally returns the input gradient.
//!
//! Batch-level work is parallelised only over independent samples; parameter
//! gradients are reduced sequentially in sample order, so results do not
//! depend on the worker count.

mod conv;
mod linear;
mod norm;
mod param;
mod pool;
mod resize;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use param::{count_params, zero_grads, Module, Param};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d, MaxPoolCache};
pub use resize::{bilinear_resize, bilinear_resize_backward, linear_taps, LinearTap};

use ndarray::{Array4, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Scalar;

/// Whether batch statistics are computed (train) or running statistics used (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He normal with fan-out scaling (conv trunks followed by ReLU).
    KaimingFanOut,
    /// Uniform in ±1/sqrt(fan_in), the usual default for linear and conv layers.
    UniformFanIn,
    Zeros,
}

pub(crate) fn init_values<T: Scalar, R: Rng>(
    init: Init,
    len: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Vec<T> {
    match init {
        Init::KaimingFanOut => {
            let std = (2.0 / fan_out.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..len).map(|_| T::of(dist.sample(rng))).collect()
        }
        Init::UniformFanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            (0..len).map(|_| T::of(dist.sample(rng))).collect()
        }
        Init::Zeros => vec![T::zero(); len],
    }
}

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}
