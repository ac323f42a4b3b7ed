use ndarray::{Array1, Array4};
use rayon::prelude::*;

use super::{Mode, Module, Param};
use crate::tensor::Scalar;

/// Per-channel batch normalisation over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Normalised activations and inverse standard deviations from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Array4<T>,
    inv_std: Array1<T>,
    mode: Mode,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    count: usize,
}

impl<T: Scalar> BatchNorm2d<T> {
    /// `name` follows the torchvision convention (`weight`, `bias`, `running_*`).
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.weight"),
                &[channels],
                vec![T::one(); channels],
            ),
            beta: Param::new(
                format!("{name}.bias"),
                &[channels],
                vec![T::zero(); channels],
            ),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                &[channels],
                vec![T::zero(); channels],
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                &[channels],
                vec![T::one(); channels],
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalises `x`. Running statistics are not touched here; a train-mode
    /// cache commits its batch statistics during [`BatchNorm2d::backward`].
    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let m = (n * hw) as f64;
                (0..c)
                    .map(|ch| {
                        let planes = || (0..n).map(move |i| &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
                        let mean = planes().map(plane_sum).sum::<f64>() / m;
                        let var = planes()
                            .map(|p| p.iter().map(|&v| (v.f64() - mean).powi(2)).sum::<f64>())
                            .sum::<f64>()
                            / m;
                        (T::of(mean), T::of(var))
                    })
                    .unzip()
            }
            Mode::Eval => (
                self.running_mean.value.iter().copied().collect(),
                self.running_var.value.iter().copied().collect(),
            ),
        };
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let beta = self.beta.value.as_slice().expect("contiguous");
        let mut x_hat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        x_hat
            .as_slice_mut()
            .expect("fresh array")
            .par_chunks_mut(hw)
            .zip(y.as_slice_mut().expect("fresh array").par_chunks_mut(hw))
            .zip(xs.par_chunks(hw))
            .enumerate()
            .for_each(|(plane, ((xh, yp), xp))| {
                let ch = plane % c;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for ((o, v), &xv) in xh.iter_mut().zip(yp.iter_mut()).zip(xp) {
                    let z = (xv - mu) * is;
                    *o = z;
                    *v = g * z + b;
                }
            });
        (
            y,
            BnCache {
                x_hat,
                inv_std: Array1::from(inv_std),
                mode,
                batch_mean: mean,
                batch_var: var,
                count: n * hw,
            },
        )
    }

    fn commit_running_stats(&mut self, cache: &BnCache<T>) {
        let m = cache.count as f64;
        let mom = T::of(self.momentum);
        let unbias = if m > 1.0 { T::of(m / (m - 1.0)) } else { T::one() };
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.value[[ch]];
            *rm = (T::one() - mom) * *rm + mom * cache.batch_mean[ch];
            let rv = &mut self.running_var.value[[ch]];
            *rv = (T::one() - mom) * *rv + mom * cache.batch_var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Array4<T>) -> Array4<T> {
        if cache.mode == Mode::Train {
            self.commit_running_stats(cache);
        }
        let (n, c, h, w) = dy.dim();
        let hw = h * w;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xhs = cache.x_hat.as_slice().expect("standard layout");
        let mut sums = vec![(0.0f64, 0.0f64); c];
        for (plane, (d, xh)) in dys.chunks(hw).zip(xhs.chunks(hw)).enumerate() {
            let s = &mut sums[plane % c];
            s.0 += plane_sum(d);
            s.1 += d.iter().zip(xh).map(|(&g, &v)| (g * v).f64()).sum::<f64>();
        }
        let m = T::of((n * hw) as f64);
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let inv_std = cache.inv_std.as_slice().expect("contiguous");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        dx.as_slice_mut()
            .expect("fresh array")
            .par_chunks_mut(hw)
            .zip(dys.par_chunks(hw))
            .zip(xhs.par_chunks(hw))
            .enumerate()
            .for_each(|(plane, ((o, d), xh))| {
                let ch = plane % c;
                let (sdy, sdyx) = (T::of(sums[ch].0), T::of(sums[ch].1));
                match cache.mode {
                    Mode::Train => {
                        let scale = gamma[ch] * inv_std[ch] / m;
                        for ((o, &g), &v) in o.iter_mut().zip(d).zip(xh) {
                            *o = scale * (m * g - sdy - v * sdyx);
                        }
                    }
                    Mode::Eval => {
                        let scale = gamma[ch] * inv_std[ch];
                        for (o, &g) in o.iter_mut().zip(d) {
                            *o = scale * g;
                        }
                    }
                }
            });
        for (ch, (sdy, sdyx)) in sums.into_iter().enumerate() {
            self.gamma.grad[[ch]] += T::of(sdyx);
            self.beta.grad[[ch]] += T::of(sdy);
        }
        dx
    }
}

/// Sum of a plane in double precision.
fn plane_sum<T: Scalar>(p: &[T]) -> f64 {
    p.iter().map(|v| v.f64()).sum()
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalises_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |(_, c, _, _)| {
            rng.random_range(-1.0..1.0) * (c as f64 + 1.0) + 3.0
        });
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let (y, cache) = bn.forward(&x, Mode::Train);
        assert_eq!(bn.running_mean.value[[0]], 0.0);
        for ch in 0..2 {
            let v = y.index_axis(Axis(1), ch);
            let mean = v.mean().unwrap();
            let var = v.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        bn.backward(&cache, &Array4::zeros(x.dim()));
        assert!(bn.running_mean.value[[0]] > 0.2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((2, 3, 3, 2), |_| rng.random_range(-1.0..1.0));
        let probe = Array4::from_shape_fn((2, 3, 3, 2), |_| rng.random_range(-1.0..1.0));
        for mode in [Mode::Train, Mode::Eval] {
            let mut bn = BatchNorm2d::<f64>::new("bn", 3);
            bn.gamma.value[[1]] = 1.7;
            bn.running_var.value[[2]] = 0.5;
            let (_, cache) = bn.forward(&x, mode);
            let dx = bn.backward(&cache, &probe);
            let loss = |xx: &Array4<f64>| (bn.forward(xx, mode).0 * &probe).sum();
            let h = 1e-6;
            for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [0, 2, 1, 0]] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!(
                    (fd - dx[idx]).abs() < 1e-7,
                    "{mode:?} {idx:?}: {fd} vs {}",
                    dx[idx]
                );
            }
        }
    }
}
