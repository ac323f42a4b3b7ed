//! Spatial and channel attention blocks.
//!
//! Both blocks rescale their input by a sigmoid-bounded map: a single `1xHxW`
//! map for spatial attention (built from channel-wise mean and max pooling
//! followed by a `k x k` convolution) and a per-channel vector for channel
//! attention (global mean and max pooling through a shared two-layer
//! perceptron). Outputs always have the input's shape.

use ndarray::{Array2, Array3, Array4, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Init, Linear, Module, Param};
use crate::tensor::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialAttentionConfig {
    pub kernel_size: usize,
}

impl SpatialAttentionConfig {
    pub fn new(kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return invalid(format!(
                "spatial attention kernel must be odd, got {kernel_size}"
            ));
        }
        Ok(Self { kernel_size })
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAttentionConfig {
    pub channels: usize,
    pub reduction_ratio: usize,
}

impl ChannelAttentionConfig {
    pub fn new(channels: usize, reduction_ratio: usize) -> Result<Self> {
        if channels == 0 || reduction_ratio == 0 || !channels.is_multiple_of(reduction_ratio) {
            return invalid(format!(
                "channel attention needs channels ({channels}) divisible by the reduction ratio ({reduction_ratio})"
            ));
        }
        Ok(Self {
            channels,
            reduction_ratio,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction_ratio
    }
}

#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    pub config: SpatialAttentionConfig,
    pub conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct SpatialCache<T> {
    x: Array4<T>,
    pooled: Array4<T>,
    argmax: Array3<usize>,
    /// Attention map `[N, H, W]`, entries in (0, 1).
    pub map: Array3<T>,
}

impl<T: Scalar> SpatialAttention<T> {
    pub fn new<R: Rng>(name: &str, config: SpatialAttentionConfig, rng: &mut R) -> Self {
        let k = config.kernel_size;
        Self {
            config,
            conv: Conv2d::new(
                &format!("{name}.conv"),
                2,
                1,
                k,
                1,
                config.padding(),
                true,
                Init::UniformFanIn,
                rng,
            ),
        }
    }

    pub fn zero_parameters(&mut self) {
        self.visit_mut(&mut |p| p.value.fill(T::zero()));
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, SpatialCache<T>) {
        let (n, c, h, w) = x.dim();
        let mut pooled = Array4::<T>::zeros((n, 2, h, w));
        let mut argmax = Array3::<usize>::zeros((n, h, w));
        let inv_c = T::one() / T::of(c as f64);
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut sum = T::zero();
                    let mut best = T::neg_infinity();
                    let mut best_c = 0;
                    for ch in 0..c {
                        let v = x[[b, ch, i, j]];
                        sum += v;
                        if v > best {
                            best = v;
                            best_c = ch;
                        }
                    }
                    pooled[[b, 0, i, j]] = sum * inv_c;
                    pooled[[b, 1, i, j]] = best;
                    argmax[[b, i, j]] = best_c;
                }
            }
        }
        let logits = self.conv.forward(&pooled);
        let map = logits.index_axis(Axis(1), 0).mapv(sigmoid);
        let mut y = x.clone();
        for (mut yb, mb) in y.outer_iter_mut().zip(map.outer_iter()) {
            for mut yc in yb.outer_iter_mut() {
                yc *= &mb;
            }
        }
        (
            y,
            SpatialCache {
                x: x.clone(),
                pooled,
                argmax,
                map,
            },
        )
    }

    pub fn backward(&mut self, cache: &SpatialCache<T>, dy: &Array4<T>) -> Array4<T> {
        let x = &cache.x;
        let (n, c, h, w) = x.dim();
        let mut dz = Array4::<T>::zeros((n, 1, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut dm = T::zero();
                    for ch in 0..c {
                        dm += dy[[b, ch, i, j]] * x[[b, ch, i, j]];
                    }
                    let m = cache.map[[b, i, j]];
                    dz[[b, 0, i, j]] = dm * m * (T::one() - m);
                }
            }
        }
        let dpooled = self
            .conv
            .backward(&cache.pooled, &dz, true)
            .expect("input gradient requested");
        let inv_c = T::one() / T::of(c as f64);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut g = dy[[b, ch, i, j]] * cache.map[[b, i, j]]
                            + dpooled[[b, 0, i, j]] * inv_c;
                        if cache.argmax[[b, i, j]] == ch {
                            g += dpooled[[b, 1, i, j]];
                        }
                        dx[[b, ch, i, j]] = g;
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for SpatialAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub config: ChannelAttentionConfig,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
struct MlpBranch<T> {
    input: Array2<T>,
    pre: Array2<T>,
    hidden: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ChannelCache<T> {
    x: Array4<T>,
    avg: MlpBranch<T>,
    max: MlpBranch<T>,
    argmax: Array2<usize>,
    /// Channel scales `[N, C]`, entries in (0, 1).
    pub scale: Array2<T>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new<R: Rng>(name: &str, config: ChannelAttentionConfig, rng: &mut R) -> Self {
        Self {
            config,
            fc1: Linear::new(
                &format!("{name}.fc1"),
                config.channels,
                config.hidden(),
                Init::UniformFanIn,
                rng,
            ),
            fc2: Linear::new(
                &format!("{name}.fc2"),
                config.hidden(),
                config.channels,
                Init::UniformFanIn,
                rng,
            ),
        }
    }

    pub fn zero_parameters(&mut self) {
        self.visit_mut(&mut |p| p.value.fill(T::zero()));
    }

    fn mlp(&self, input: Array2<T>) -> (Array2<T>, MlpBranch<T>) {
        let pre = self.fc1.forward(&input);
        let hidden = pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let out = self.fc2.forward(&hidden);
        (out, MlpBranch { input, pre, hidden })
    }

    fn mlp_backward(&mut self, branch: &MlpBranch<T>, d_out: &Array2<T>) -> Array2<T> {
        let mut d_hidden = self.fc2.backward(&branch.hidden, d_out);
        Zip::from(&mut d_hidden).and(&branch.pre).for_each(|d, &p| {
            if p <= T::zero() {
                *d = T::zero();
            }
        });
        self.fc1.backward(&branch.input, &d_hidden)
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, ChannelCache<T>)> {
        let (n, c, h, w) = x.dim();
        if c != self.config.channels {
            return invalid(format!(
                "channel attention built for {} channels, got {c}",
                self.config.channels
            ));
        }
        let hw = T::of((h * w) as f64);
        let mut avg = Array2::<T>::zeros((n, c));
        let mut mx = Array2::<T>::zeros((n, c));
        let mut argmax = Array2::<usize>::zeros((n, c));
        for b in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), ch);
                let mut best = T::neg_infinity();
                let mut best_k = 0;
                // Summing in sorted order makes the pooled value a function of the
                // multiset of activations, so spatial permutations are exact no-ops.
                let mut values: Vec<T> = plane.iter().copied().collect();
                values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let sum = values.into_iter().fold(T::zero(), |a, v| a + v);
                for (k, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                avg[[b, ch]] = sum / hw;
                mx[[b, ch]] = best;
                argmax[[b, ch]] = best_k;
            }
        }
        let (sa, avg_branch) = self.mlp(avg);
        let (sm, max_branch) = self.mlp(mx);
        let scale = (sa + sm).mapv(sigmoid);
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let s = scale[[b, ch]];
                y.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * s);
            }
        }
        Ok((
            y,
            ChannelCache {
                x: x.clone(),
                avg: avg_branch,
                max: max_branch,
                argmax,
                scale,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ChannelCache<T>, dy: &Array4<T>) -> Array4<T> {
        let x = &cache.x;
        let (n, c, h, w) = x.dim();
        let mut ds = Array2::<T>::zeros((n, c));
        for b in 0..n {
            for ch in 0..c {
                let xs = x.index_axis(Axis(0), b);
                let dys = dy.index_axis(Axis(0), b);
                let dm = Zip::from(xs.index_axis(Axis(0), ch))
                    .and(dys.index_axis(Axis(0), ch))
                    .fold(T::zero(), |a, &xv, &g| a + xv * g);
                let s = cache.scale[[b, ch]];
                ds[[b, ch]] = dm * s * (T::one() - s);
            }
        }
        let d_avg = self.mlp_backward(&cache.avg, &ds);
        let d_max = self.mlp_backward(&cache.max, &ds);
        let inv_hw = T::one() / T::of((h * w) as f64);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let s = cache.scale[[b, ch]];
                let da = d_avg[[b, ch]] * inv_hw;
                let mut plane = dx.index_axis_mut(Axis(0), b);
                let mut plane = plane.index_axis_mut(Axis(0), ch);
                let dys = dy.index_axis(Axis(0), b);
                Zip::from(&mut plane)
                    .and(dys.index_axis(Axis(0), ch))
                    .for_each(|d, &g| *d = g * s + da);
                let k = cache.argmax[[b, ch]];
                plane[[k / w, k % w]] += d_max[[b, ch]];
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
