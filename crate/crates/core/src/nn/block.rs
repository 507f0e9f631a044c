use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::{join, relu, relu_backward, BatchNorm2d, Conv2d, Mode, Parameterized, Slot};
use crate::scalar::Scalar;

/// Two rounds of 3×3 conv → batch norm → ReLU. The convolutions carry no
/// bias since batch norm removes it.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    relu_out: Option<(Array4<T>, Array4<T>)>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, false, rng),
            bn1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, false, rng),
            bn2: BatchNorm2d::new(out_channels),
            relu_out: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let h1 = relu(&self.bn1.forward(&self.conv1.forward(x, mode), mode));
        let h2 = relu(&self.bn2.forward(&self.conv2.forward(&h1, mode), mode));
        self.relu_out = (mode == Mode::Train).then(|| (h1, h2.clone()));
        h2
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (h1, h2) = self.relu_out.take().expect("forward(Train) before backward");
        let d = self.bn2.backward(&relu_backward(dy, &h2));
        let d = self.conv2.backward(&d);
        let d = self.bn1.backward(&relu_backward(&d, &h1));
        self.conv1.backward(&d)
    }
}

impl<T: Scalar> Parameterized<T> for ConvBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }
}
