use ndarray::{ArrayD, Zip};

use crate::nn::Module;
use crate::tensor::Scalar;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Per trainable parameter: `g = grad + wd * w`, `v = momentum * v + g`,
/// `w -= lr * v`. The velocity starts at zero, so the first step is `-lr * g`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per trainable parameter, in visit order.
    pub velocity: Vec<ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let velocity = &mut self.velocity;
        let mut k = 0;
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if velocity.len() == k {
                velocity.push(ArrayD::zeros(p.value.raw_dim()));
            }
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut velocity[k])
                .for_each(|w, &g, v| {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                });
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    #[test]
    fn matches_hand_iterated_recurrence() {
        let mut m = One(Param::new("w", &[1], vec![2.0]));
        let mut opt = Sgd::new(0.9, 0.1);
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for step in 0..5 {
            let g = 0.5 - 0.1 * step as f64;
            m.0.grad[[0]] = g;
            opt.step(&mut m, 0.01);
            v = 0.9 * v + (g + 0.1 * w);
            w -= 0.01 * v;
            assert!((m.0.value[[0]] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn buffers_are_left_alone() {
        let mut m = One(Param::buffer("running_mean", &[2], vec![1.0, 2.0]));
        m.0.grad.fill(5.0);
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut m, 1.0);
        assert_eq!(m.0.value.as_slice().unwrap(), &[1.0, 2.0]);
        assert!(opt.velocity.is_empty());
    }
}
