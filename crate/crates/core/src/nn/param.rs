use ndarray::{ArrayD, IxDyn};

use crate::tensor::Scalar;

/// A named tensor with its accumulated gradient.
///
/// Non-trainable parameters (batch-norm running statistics) are carried the
/// same way so checkpoints can treat all state uniformly.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Self {
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data");
        let grad = ArrayD::zeros(IxDyn(shape));
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, shape, data)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything owning parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

/// Number of trainable scalars.
pub fn count_params<T: Scalar>(m: &dyn Module<T>) -> usize {
    let mut n = 0;
    m.visit(&mut |p| {
        if p.trainable {
            n += p.len();
        }
    });
    n
}

pub fn zero_grads<T: Scalar>(m: &mut dyn Module<T>) {
    m.visit_mut(&mut |p| p.zero_grad());
}
