use crate::tensor::gemm;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{init_values, Init, Module, Param};
use crate::tensor::Scalar;

/// Fully connected layer on `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_values(
            init,
            in_features * out_features,
            in_features,
            out_features,
            rng,
        );
        let b = match init {
            Init::Zeros => vec![T::zero(); out_features],
            _ => init_values(
                Init::UniformFanIn,
                out_features,
                in_features,
                out_features,
                rng,
            ),
        };
        Self {
            weight: Param::new(format!("{name}.weight"), &[out_features, in_features], w),
            bias: Param::new(format!("{name}.bias"), &[out_features], b),
            in_features,
            out_features,
        }
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("2-d weight")
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = Array2::<T>::zeros((x.nrows(), self.out_features));
        gemm(T::one(), x, &self.w().t(), T::zero(), &mut y);
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d");
        y += &b;
        y
    }

    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let mut dw = Array2::<T>::zeros((self.out_features, self.in_features));
        gemm(T::one(), &dy.t(), x, T::zero(), &mut dw);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        let mut dx = Array2::<T>::zeros((x.nrows(), self.in_features));
        gemm(T::one(), dy, &self.w(), T::zero(), &mut dx);
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
