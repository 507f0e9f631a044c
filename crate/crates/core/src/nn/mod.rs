//! Layers with hand-written backward passes.
//!
//! Activations inside the network are stored channel-major, `(C, B, H, W)`,
//! so that a convolution is a single `(C_out, C_in·k²) × (C_in·k², B·H·W)`
//! product and per-channel statistics run over contiguous memory. Use
//! [`to_cbhw`] / [`to_bchw`] at the boundaries.
//!
//! Every layer caches what its backward pass needs when run in
//! [`Mode::Train`]; `backward` must follow the matching `forward`.

mod block;
mod conv;
mod norm;
mod ops;

pub use block::ConvBlock;
pub use conv::Conv2d;
pub use norm::BatchNorm2d;
pub use ops::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_channels, softmax_channels_backward, split_channels, upsample2,
    upsample2_backward, PoolIndices,
};

use ndarray::{Array4, ArrayD, ArrayView4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::{cst, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward, running stats updated.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

/// A learnable array and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Normal(0, std) initialization.
    pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let values: Vec<T> = (0..n).map(|_| cst(dist.sample(rng))).collect();
        Self::new(ArrayD::from_shape_vec(shape, values).expect("shape matches length"))
    }
}

/// Either a learnable parameter or a non-learnable state buffer (running
/// batch-norm statistics).
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut ArrayD<T>),
}

/// Named traversal of every parameter and buffer in a fixed order. Names are
/// dot-joined paths such as `a.enc.l1.conv1.weight`.
pub trait Parameterized<T: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `(B, C, H, W)` → channel-major `(C, B, H, W)`, standard layout.
pub fn to_cbhw<T: Scalar>(x: ArrayView4<T>) -> Array4<T> {
    x.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// Channel-major `(C, B, H, W)` → `(B, C, H, W)`, standard layout.
pub fn to_bchw<T: Scalar>(x: ArrayView4<T>) -> Array4<T> {
    x.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn layout_round_trip() {
        let x = Array4::from_shape_fn((2, 3, 4, 5), |(b, c, y, w)| (b * 1000 + c * 100 + y * 10 + w) as f64);
        let cb = to_cbhw(x.view());
        assert_eq!(cb.dim(), (3, 2, 4, 5));
        assert_eq!(cb[[2, 1, 3, 4]], x[[1, 2, 3, 4]]);
        assert_eq!(to_bchw(cb.view()), x);
    }
}
