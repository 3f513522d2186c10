//! Hand-rolled layers with explicit backward passes.
//!
//! Every layer offers `forward` (read-only, safe to share across threads)
//! and `forward_train` / `backward`, which cache what the backward pass
//! needs inside the layer and accumulate parameter gradients into
//! [`Param::grad`].

mod conv;
mod norm;
mod pool;

pub use conv::{Conv2d, ConvGeometry};
pub use norm::BatchNorm2d;
pub use pool::MaxPool2d;

use crate::tensor::Tensor;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let len = shape.iter().product();
        Param::new(shape, vec![v; len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the rectified activation was not positive.
pub fn relu_backward(grad: &mut Tensor, activated: &Tensor) {
    assert_eq!(grad.shape(), activated.shape());
    for (g, a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}
